import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy.linalg

from . import export
from .errors import DegenerateInputError, ValidationError
from .spectral import (
    Ecdf,
    EigenSpectrum,
    MpParams,
    covariance,
    eigenvalues,
    esd_table,
    mp_median,
    mp_quantile_grid,
    sample_spectrum,
    spectral_distance,
)
from .synth import gen_noise
from .types import (
    METRICS,
    REFERENCES,
    Metric,
    RealMatrix,
    RealVector,
    Reference,
    count,
    real_matrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FactorDecomposition:
    loadings: RealMatrix
    factors: RealMatrix
    residual: RealMatrix
    level: int

    @property
    def common(self) -> RealMatrix:
        return self.loadings @ self.factors


@dataclass(frozen=True)
class HdfmConfig:
    p_max: int = 20
    metric: Metric = "wasserstein1"
    reference: Reference = "analytic_mp"
    mc_trials: int = 10
    seed: int = 0
    # None fits sigma^2 per level by median matching; a value fixes it
    sigma2: Optional[float] = None
    tie_tolerance: float = 1.0
    early_stop_tolerance: Optional[float] = None
    threads: int = 1

    def __post_init__(self) -> None:
        count(self.p_max, "p_max")
        count(self.mc_trials, "mc_trials", minimum=1)
        count(self.threads, "threads", minimum=1)
        if self.metric not in METRICS:
            raise ValueError(f"Unknown metric {self.metric!r}")
        if self.reference not in REFERENCES:
            raise ValueError(f"Unknown reference {self.reference!r}")
        if self.sigma2 is not None and not (
            math.isfinite(self.sigma2) and self.sigma2 > 0
        ):
            raise ValueError(f"Fixed sigma2 must be positive, got {self.sigma2}")
        if not self.tie_tolerance >= 0:
            raise ValueError(f"tie_tolerance must be >= 0, got {self.tie_tolerance}")
        if self.early_stop_tolerance is not None and not self.early_stop_tolerance >= 0:
            raise ValueError(
                f"early_stop_tolerance must be >= 0, got {self.early_stop_tolerance}"
            )

    @property
    def sigma2_mode(self) -> str:
        return "fit_median" if self.sigma2 is None else "fixed"


@dataclass(frozen=True, eq=False)
class LevelFit:
    p: int
    distance: float
    sigma2: float
    spectrum: EigenSpectrum


@dataclass(frozen=True, eq=False)
class HdfmResult:
    p_hat: int
    sigma2_hat: float
    levels: tuple[LevelFit, ...]
    decomposition: FactorDecomposition
    config: HdfmConfig
    early_stopped: bool = False

    @property
    def distance_curve(self) -> list[tuple[int, float]]:
        return [(fit.p, fit.distance) for fit in self.levels]

    @property
    def features(self) -> RealMatrix:
        return self.decomposition.factors

    def as_dict(self) -> dict[str, Any]:
        n, t = self.decomposition.residual.shape
        return {
            "p_hat": self.p_hat,
            "sigma2_hat": self.sigma2_hat,
            "sigma2_mode": self.config.sigma2_mode,
            "n": n,
            "t": t,
            "early_stopped": self.early_stopped,
            "distance_curve": [
                {"p": fit.p, "distance": fit.distance, "sigma2": fit.sigma2}
                for fit in self.levels
            ],
            "config": dataclasses.asdict(self.config),
        }


def _principal_axes(r: RealMatrix) -> tuple[RealVector, RealMatrix]:
    values, vectors = scipy.linalg.eigh(covariance(r))
    values, vectors = values[::-1], vectors[:, ::-1]
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return values, vectors * signs


def _check_level(r: RealMatrix, p: int) -> int:
    count(p, "p")
    if p > min(r.shape):
        raise ValueError(f"p={p} exceeds min(N, T) = {min(r.shape)}")
    return p


def top_principal_components(r: Any, p: int) -> tuple[RealMatrix, RealMatrix]:
    values = real_matrix(r, "R")
    _check_level(values, p)
    n, t = values.shape
    if p == 0:
        return np.zeros((n, 0)), np.zeros((0, t))
    _, vectors = _principal_axes(values)
    loadings = np.ascontiguousarray(vectors[:, :p])
    return loadings, loadings.T @ values


def residual(r: Any, p: int) -> RealMatrix:
    return decompose(r, p).residual


def decompose(r: Any, p: int) -> FactorDecomposition:
    values = real_matrix(r, "R")
    loadings, factors = top_principal_components(values, p)
    return FactorDecomposition(loadings, factors, values - loadings @ factors, p)


def estimate_sigma2(spectrum: EigenSpectrum) -> float:
    if len(spectrum) == 0:
        raise ValidationError("Cannot estimate sigma^2 from an empty spectrum")
    median = float(np.median(spectrum.values))
    if median <= 0:
        raise ValidationError(
            "Cannot estimate sigma^2: spectrum median is zero (all-zero or rank-deficient spectrum)"
        )
    return median / mp_median(spectrum.c)


def extract_features(r: Any, p: int) -> RealMatrix:
    count(p, "p", minimum=1)
    return top_principal_components(r, p)[1]


def pca_compress(r: Any, p: int) -> RealMatrix:
    return extract_features(r, p)


def constant_rows(r: RealMatrix) -> list[int]:
    return [int(i) for i in np.nonzero(np.ptp(r, axis=1) == 0)[0]]


def _resolution(fit: LevelFit) -> float:
    # distance change caused by one of the compared eigenvalues
    n = len(fit.spectrum)
    if fit.spectrum.t is None or n == 0:
        return 0.0
    return fit.sigma2 * math.sqrt(fit.spectrum.c) / n


def _ks_resolution(fit: LevelFit) -> float:
    return 1.0 / max(len(fit.spectrum), 1)


def _monte_carlo_base(n: int, t: int, config: HdfmConfig) -> RealVector:
    trials = np.random.SeedSequence(config.seed).spawn(config.mc_trials)
    pooled = [sample_spectrum(gen_noise(n, t, 1.0, seed)).values for seed in trials]
    return np.sort(np.concatenate(pooled))


def _scan(
    fit_level: Callable[[int], LevelFit],
    config: HdfmConfig,
    atom: Callable[[LevelFit], float],
) -> tuple[list[LevelFit], bool]:
    levels = range(config.p_max + 1)
    tolerance = config.early_stop_tolerance
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            candidates = iter(list(pool.map(fit_level, levels)))
    else:
        candidates = (fit_level(p) for p in levels)

    fits: list[LevelFit] = []
    best: Optional[LevelFit] = None
    for fit in candidates:
        fits.append(fit)
        logger.debug("level p=%d: distance=%.6g sigma2=%.6g", fit.p, fit.distance, fit.sigma2)
        if best is None or fit.distance < best.distance:
            best = fit
        elif tolerance is not None and fit.distance > best.distance + tolerance * atom(best):
            if fit.p < config.p_max:
                logger.info("Early stop after p=%d (minimum at p=%d)", fit.p, best.p)
                return fits, True
    return fits, False


def fit_factor_count(r: Any, config: HdfmConfig = HdfmConfig()) -> HdfmResult:
    values = real_matrix(r, "R")
    n, t = values.shape
    if n < 4:
        raise ValueError(f"HDFM needs at least 4 rows, got {n}")
    if n > t:
        raise ValueError(f"HDFM needs N <= T (aspect ratio <= 1), got {n} x {t}")
    if config.p_max >= n:
        raise ValueError(f"p_max={config.p_max} must be < N={n}")
    degenerate = constant_rows(values)
    if degenerate:
        raise DegenerateInputError(degenerate)

    cov = covariance(values)
    _, vectors = _principal_axes(values)
    c = n / t
    base = _monte_carlo_base(n, t, config) if config.reference == "monte_carlo" else None

    def fit_level(p: int) -> LevelFit:
        removed = vectors[:, :p]
        projected = cov - removed @ (removed.T @ cov)
        projected = projected - (projected @ removed) @ removed.T
        # the p removed directions are exact zeros, not noise
        kept = eigenvalues((projected + projected.T) / 2, t=t).values[: n - p]
        spectrum = EigenSpectrum(kept, n, t)
        sigma2 = config.sigma2 if config.sigma2 is not None else estimate_sigma2(spectrum)
        if base is None:
            reference = Ecdf.from_samples(mp_quantile_grid(MpParams(sigma2, c), n - p))
        else:
            reference = Ecdf.from_samples(sigma2 * base)
        distance = spectral_distance(Ecdf.from_samples(kept), reference, config.metric)
        return LevelFit(p, distance, sigma2, spectrum)

    atom = _ks_resolution if config.metric == "kolmogorov_smirnov" else _resolution
    fits, stopped = _scan(fit_level, config, atom)

    best = min(fits, key=lambda fit: fit.distance)
    cutoff = best.distance + config.tie_tolerance * atom(best)
    chosen = next(fit for fit in fits if fit.distance <= cutoff)
    logger.info(
        "Selected p=%d (sigma2=%.6g, distance=%.6g; minimum %.6g at p=%d)",
        chosen.p,
        chosen.sigma2,
        chosen.distance,
        best.distance,
        best.p,
    )
    return HdfmResult(
        p_hat=chosen.p,
        sigma2_hat=chosen.sigma2,
        levels=tuple(fits),
        decomposition=decompose(values, chosen.p),
        config=config,
        early_stopped=stopped,
    )


def write_result(result: HdfmResult, out_dir: export.PathLike) -> list[Path]:
    out = Path(out_dir)
    chosen = result.levels[result.p_hat]
    spectrum = chosen.spectrum
    esd = esd_table(spectrum.values, MpParams(result.sigma2_hat, spectrum.c))
    return [
        export.write_json(out / "hdfm.json", result.as_dict()),
        export.write_matrix(out / "features.csv", result.features),
        export.write_table(
            out / "distance_curve.csv",
            {
                "p": [fit.p for fit in result.levels],
                "distance": [fit.distance for fit in result.levels],
                "sigma2": [fit.sigma2 for fit in result.levels],
            },
        ),
        export.write_table(out / "residual_esd.csv", esd),
    ]
