import functools
import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, overload

import numpy as np
import numpy.typing as npt
import scipy.integrate
import scipy.linalg
import scipy.optimize
import scipy.stats

from . import export
from .errors import ValidationError
from .types import Metric, RealVector, count, real_vector

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-10
_TABLE_CELLS = 16384


@dataclass(frozen=True, eq=False)
class EigenSpectrum:
    values: RealVector
    n: int
    t: Optional[int] = None

    def __post_init__(self) -> None:
        values = real_vector(self.values, "spectrum")
        if values.size and np.any(np.diff(values) > 0):
            raise ValidationError("Spectrum values must be sorted in descending order")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        count(self.n, "n", minimum=1)
        if self.t is not None:
            count(self.t, "t", minimum=1)

    @property
    def c(self) -> float:
        if self.t is None:
            raise ValueError("Aspect ratio unknown: spectrum has no sample count")
        return self.n / self.t

    def __len__(self) -> int:
        return self.values.shape[0]

    def scaled(self, factor: float) -> "EigenSpectrum":
        return EigenSpectrum(self.values * factor, self.n, self.t)


@dataclass(frozen=True)
class MpParams:
    sigma2: float
    c: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (0 < self.c <= 1):
            raise ValueError(f"Aspect ratio c must be in (0, 1], got {self.c}")

    @property
    def edges(self) -> tuple[float, float]:
        return mp_edges(self)


@dataclass(frozen=True, eq=False)
class Ecdf:
    support: RealVector
    cumulative: RealVector

    def __post_init__(self) -> None:
        support = real_vector(self.support, "support")
        cumulative = real_vector(self.cumulative, "cumulative")
        if support.size == 0:
            raise ValidationError("Empty ECDF")
        if support.shape != cumulative.shape:
            raise ValidationError("ECDF support and weights differ in length")
        if np.any(np.diff(support) <= 0):
            raise ValidationError("ECDF support must be strictly increasing")
        if np.any(np.diff(cumulative) < 0) or cumulative[0] < 0:
            raise ValidationError("ECDF weights must be nondecreasing and nonnegative")
        if not math.isclose(cumulative[-1], 1.0, abs_tol=1e-12):
            raise ValidationError(f"ECDF must end at 1, got {cumulative[-1]}")
        cumulative = cumulative.copy()
        cumulative[-1] = 1.0
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "cumulative", cumulative)

    @classmethod
    def from_samples(cls, values: Any) -> "Ecdf":
        samples = real_vector(values, "samples")
        if samples.size == 0:
            raise ValidationError("Cannot build an ECDF from no samples")
        support, counts = np.unique(samples, return_counts=True)
        return cls(support, np.cumsum(counts) / samples.size)

    @property
    def weights(self) -> RealVector:
        """Probability mass at each support point."""
        return np.diff(self.cumulative, prepend=0.0)

    def __call__(self, x: Any) -> Any:
        idx = np.searchsorted(self.support, x, side="right")
        padded = np.concatenate(([0.0], self.cumulative))
        return padded[idx]


def covariance(u: Any) -> npt.NDArray[Any]:
    arr = np.asarray(u)
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"Expected an N x T matrix, got shape {arr.shape}")
    n, t = arr.shape
    if n == 0 or t == 0:
        raise ValueError(f"Covariance needs N >= 1 and T >= 1, got {n} x {t}")
    cov = arr @ arr.conj().T / t
    return (cov + cov.conj().T) / 2


def eigenvalues(c_matrix: Any, t: Optional[int] = None) -> EigenSpectrum:
    cov = np.asarray(c_matrix)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] == 0:
        raise ValidationError(f"Expected a square matrix, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValidationError("Matrix contains non-finite values")
    scale = max(1.0, float(np.max(np.abs(cov))))
    asym = float(np.max(np.abs(cov - cov.conj().T)))
    if asym > SYMMETRY_TOLERANCE * scale:
        raise ValidationError(f"Matrix is not symmetric (max deviation {asym:.3g})")
    values = scipy.linalg.eigvalsh(cov)[::-1]
    floor = -PSD_TOLERANCE * max(1.0, float(np.max(np.abs(values))))
    if values[-1] < floor:
        raise ValidationError(
            f"Matrix is not positive semidefinite (eigenvalue {values[-1]:.3g})"
        )
    return EigenSpectrum(np.clip(values, 0.0, None), cov.shape[0], t)


def sample_spectrum(r: Any) -> EigenSpectrum:
    arr = np.asarray(r)
    return eigenvalues(covariance(arr), t=arr.shape[1])


def mp_edges(params: MpParams) -> tuple[float, float]:
    root = math.sqrt(params.c)
    return params.sigma2 * (1 - root) ** 2, params.sigma2 * (1 + root) ** 2


def bbp_threshold(params: MpParams) -> float:
    return params.sigma2 * math.sqrt(params.c)


@overload
def mp_pdf(x: float, params: MpParams) -> float: ...
@overload
def mp_pdf(x: npt.NDArray[Any], params: MpParams) -> RealVector: ...
def mp_pdf(x: Any, params: MpParams) -> Any:
    a, b = mp_edges(params)
    xs = np.asarray(x, dtype=np.float64)
    density = np.zeros_like(xs)
    inside = (xs > a) & (xs < b)
    xi = xs[inside]
    density[inside] = np.sqrt((b - xi) * (xi - a)) / (
        2 * np.pi * params.c * params.sigma2 * xi
    )
    return float(density) if np.ndim(x) == 0 else density


# In theta, with x = a + (b - a)(1 - cos theta)/2, the MP density has no
# square-root edges; both the quadrature and the table below integrate it.
def _theta_density(theta: Any, c: float) -> Any:
    a, b = mp_edges(MpParams(1.0, c))
    if a == 0.0:
        return b * (1 + np.cos(theta)) / (4 * np.pi * c)
    x = a + (b - a) * (1 - np.cos(theta)) / 2
    return (b - a) ** 2 * np.sin(theta) ** 2 / (8 * np.pi * c * x)


def _unit_theta(x: float, c: float) -> float:
    a, b = mp_edges(MpParams(1.0, c))
    return math.acos(min(1.0, max(-1.0, 1 - 2 * (x - a) / (b - a))))


def _mp_cdf_scalar(x: float, params: MpParams) -> float:
    a, b = mp_edges(MpParams(1.0, params.c))
    u = x / params.sigma2
    if u <= a:
        return 0.0
    if u >= b:
        return 1.0
    value, _ = scipy.integrate.quad(
        _theta_density, 0.0, _unit_theta(u, params.c), args=(params.c,), epsabs=1e-12
    )
    return min(1.0, max(0.0, value))


@overload
def mp_cdf(x: float, params: MpParams) -> float: ...
@overload
def mp_cdf(x: npt.NDArray[Any], params: MpParams) -> RealVector: ...
def mp_cdf(x: Any, params: MpParams) -> Any:
    if np.ndim(x) == 0:
        return _mp_cdf_scalar(float(x), params)
    xs = np.asarray(x, dtype=np.float64)
    return np.array([_mp_cdf_scalar(v, params) for v in xs.ravel()]).reshape(xs.shape)


@functools.lru_cache(maxsize=256)
def mp_median(c: float) -> float:
    params = MpParams(1.0, c)
    a, b = mp_edges(params)
    return float(
        scipy.optimize.bisect(
            lambda x: mp_cdf(x, params) - 0.5, a, b, xtol=1e-13, rtol=1e-13
        )
    )


@functools.lru_cache(maxsize=64)
def _unit_table(c: float) -> tuple[RealVector, RealVector]:
    a, b = mp_edges(MpParams(1.0, c))
    theta = np.linspace(0.0, np.pi, _TABLE_CELLS + 1)
    mid = (theta[:-1] + theta[1:]) / 2
    mass = _theta_density(mid, c) * np.diff(theta)
    cdf = np.concatenate(([0.0], np.cumsum(mass)))
    cdf /= cdf[-1]
    x = a + (b - a) * (1 - np.cos(theta)) / 2
    x.setflags(write=False)
    cdf.setflags(write=False)
    return x, cdf


def mp_quantiles(params: MpParams, probs: Any) -> RealVector:
    x, cdf = _unit_table(params.c)
    return params.sigma2 * np.interp(np.asarray(probs, dtype=np.float64), cdf, x)


def mp_quantile_grid(params: MpParams, points: int) -> RealVector:
    """Quantiles at the midpoints (i + 1/2) / points, ascending."""
    count(points, "points", minimum=1)
    return mp_quantiles(params, (np.arange(points) + 0.5) / points)


def mp_reference_grid(
    params: MpParams, points: int = 512
) -> tuple[RealVector, RealVector, RealVector]:
    count(points, "points", minimum=2)
    a, b = mp_edges(params)
    x = np.linspace(a, b, points)
    table_x, table_cdf = _unit_table(params.c)
    cdf = np.interp(x / params.sigma2, table_x, table_cdf)
    return x, mp_pdf(x, params), cdf


def spectral_distance(a: Ecdf, b: Ecdf, metric: Metric = "wasserstein1") -> float:
    if metric == "kolmogorov_smirnov":
        support = np.union1d(a.support, b.support)
        return float(np.abs(a(support) - b(support)).max())
    elif metric == "wasserstein1":
        return float(
            scipy.stats.wasserstein_distance(a.support, b.support, a.weights, b.weights)
        )
    raise ValueError(f"Unknown spectral distance metric {metric!r}")


def spiked_limit(lam: float, params: MpParams) -> float:
    if not lam > 0:
        raise ValueError(f"Spike strength must be positive, got {lam}")
    s2 = params.sigma2
    if lam > bbp_threshold(params):
        return (lam + s2) * (lam + s2 * params.c) / lam
    return mp_edges(params)[1]


def write_spectrum_csv(path: export.PathLike, spectrum: EigenSpectrum) -> None:
    export.write_table(
        path,
        {"index": np.arange(len(spectrum)), "eigenvalue": spectrum.values},
    )


def write_mp_reference_csv(
    path: export.PathLike, params: MpParams, points: int = 512
) -> None:
    x, pdf, cdf = mp_reference_grid(params, points)
    export.write_table(path, {"x": x, "pdf": pdf, "cdf": cdf})


def esd_table(values: RealVector, params: MpParams) -> dict[str, RealVector]:
    """Sorted eigenvalues with their ESD and the MP law evaluated at each."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    table_x, table_cdf = _unit_table(params.c)
    return {
        "eigenvalue": xs,
        "esd": Ecdf.from_samples(xs)(xs),
        "mp_cdf": np.interp(xs / params.sigma2, table_x, table_cdf),
        "mp_pdf": mp_pdf(xs, params),
    }


def distance_to_mp(
    values: Any, params: MpParams, metric: Metric = "kolmogorov_smirnov"
) -> float:
    """Distance from an ESD to the MP law itself rather than to a sampled reference."""
    xs = np.sort(real_vector(values, "eigenvalues"))
    n = xs.size
    if n == 0:
        raise ValidationError("Empty spectrum")
    if metric == "kolmogorov_smirnov":
        table_x, table_cdf = _unit_table(params.c)
        result = scipy.stats.kstest(
            xs,
            lambda x: np.interp(x / params.sigma2, table_x, table_cdf),
            method="asymp",
        )
        return float(result.statistic)
    elif metric == "wasserstein1":
        grid = mp_quantile_grid(params, max(_TABLE_CELLS // 4, n))
        return float(scipy.stats.wasserstein_distance(xs, grid))
    raise ValueError(f"Unknown spectral distance metric {metric!r}")
