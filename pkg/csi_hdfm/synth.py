import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
import scipy.linalg
from typing_extensions import TypeAlias

from .csi import CsiFrame
from .types import RealMatrix, count

logger = logging.getLogger(__name__)

SeedLike: TypeAlias = Union[int, np.random.SeedSequence]


def derive_seed(master: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), *(int(p) for p in path)])


def seed_value(seed: SeedLike) -> int:
    """A 64-bit integer standing for a seed, for manifests."""
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1, dtype=np.uint64)[0])
    return int(seed)


@dataclass(frozen=True)
class SpikedModelSpec:
    n: int
    t: int
    strengths: tuple[float, ...] = ()
    sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        count(self.n, "n", minimum=1)
        count(self.t, "t", minimum=1)
        strengths = tuple(float(s) for s in self.strengths)
        object.__setattr__(self, "strengths", strengths)
        if any(not (math.isfinite(s) and s > 0) for s in strengths):
            raise ValueError(f"Spike strengths must be positive, got {strengths}")
        if any(a <= b for a, b in zip(strengths, strengths[1:])):
            raise ValueError(f"Spike strengths must be strictly descending, got {strengths}")
        if len(strengths) >= self.n:
            raise ValueError(f"Need p < n, got p={len(strengths)}, n={self.n}")
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def p(self) -> int:
        return len(self.strengths)

    @property
    def c(self) -> float:
        return self.n / self.t


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: tuple[tuple[str, SpikedModelSpec], ...]
    frames_per_class: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(tuple(c) for c in self.classes))
        labels = [label for label, _ in self.classes]
        if not labels:
            raise ValueError("Dataset needs at least one class")
        dupes = sorted({label for label in labels if labels.count(label) > 1})
        if dupes:
            raise ValueError(f"Duplicate class labels: {', '.join(dupes)}")
        if any(not label for label in labels):
            raise ValueError("Class labels must be nonempty")
        count(self.frames_per_class, "frames_per_class", minimum=1)

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.classes]


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    label: str
    class_index: int
    frame_index: int
    seed: int
    r: RealMatrix
    loadings: RealMatrix = field(repr=False)
    factors: RealMatrix = field(repr=False)

    @property
    def sample_id(self) -> str:
        return f"{self.label}-{self.frame_index:04d}"


def gen_noise(n: int, t: int, sigma2: float, seed: SeedLike) -> RealMatrix:
    count(n, "n", minimum=1)
    count(t, "t", minimum=1)
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(sigma2), size=(n, t))


def random_frame(n: int, p: int, seed: SeedLike) -> RealMatrix:
    """Seeded N x p matrix with orthonormal columns (QR of a Gaussian)."""
    if p == 0:
        return np.zeros((n, 0))
    rng = np.random.default_rng(seed)
    q, r = scipy.linalg.qr(rng.standard_normal((n, p)), mode="economic")
    # unique QR: positive diagonal in R
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def gen_spiked(spec: SpikedModelSpec) -> tuple[RealMatrix, RealMatrix, RealMatrix]:
    frame_seed, factor_seed, noise_seed = np.random.SeedSequence(spec.seed).spawn(3)
    p = spec.p
    loadings = random_frame(spec.n, p, frame_seed) * np.sqrt(np.asarray(spec.strengths))
    factors = np.random.default_rng(factor_seed).standard_normal((p, spec.t))
    r = loadings @ factors + gen_noise(spec.n, spec.t, spec.sigma2, noise_seed)
    return r, loadings, factors


def gen_labeled_dataset(
    spec: SyntheticDatasetSpec, threads: int = 1
) -> list[SyntheticFrame]:
    jobs = [
        (class_index, label, template, frame_index)
        for class_index, (label, template) in enumerate(spec.classes)
        for frame_index in range(spec.frames_per_class)
    ]

    def build(job: tuple[int, str, SpikedModelSpec, int]) -> SyntheticFrame:
        class_index, label, template, frame_index = job
        seed = seed_value(derive_seed(spec.seed, class_index, frame_index))
        r, loadings, factors = gen_spiked(
            SpikedModelSpec(template.n, template.t, template.strengths, template.sigma2, seed)
        )
        return SyntheticFrame(label, class_index, frame_index, seed, r, loadings, factors)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(build, jobs))
    else:
        frames = [build(job) for job in jobs]
    logger.info(
        "Generated %d synthetic frames over %d classes", len(frames), len(spec.classes)
    )
    return frames


def class_strengths(
    base: Sequence[float], class_index: int, spread: float
) -> tuple[float, ...]:
    """Leading strength shared, the rest scaled by 1 + spread * class_index."""
    if not base:
        return ()
    scale = 1.0 + spread * class_index
    strengths = (float(base[0]), *(float(s) * scale for s in base[1:]))
    if any(a <= b for a, b in zip(strengths, strengths[1:])):
        raise ValueError(
            f"Class {class_index} strengths {strengths} are not strictly descending;"
            " lower the class spread or widen the gap after the leading strength"
        )
    return strengths


def dataset_spec(
    n: int,
    t: int,
    strengths: Sequence[float],
    classes: int,
    frames_per_class: int,
    sigma2: float = 1.0,
    seed: int = 0,
    class_spread: float = 0.25,
    labels: Any = None,
) -> SyntheticDatasetSpec:
    labels = list(labels) if labels is not None else [f"class{k}" for k in range(classes)]
    if len(labels) != classes:
        raise ValueError(f"Got {len(labels)} labels for {classes} classes")
    return SyntheticDatasetSpec(
        tuple(
            (label, SpikedModelSpec(n, t, class_strengths(strengths, k, class_spread), sigma2))
            for k, label in enumerate(labels)
        ),
        frames_per_class,
        seed,
    )


def to_csi_frame(
    r: RealMatrix, n_tx: int, n_rx: int, n_sc: int, sample_rate_hz: float = 1000.0
) -> tuple[CsiFrame, float]:
    """Amplitude channel = r + offset (offset keeps it positive), phase zero."""
    offset = 1.0 + max(0.0, -float(r.min()))
    return CsiFrame(n_tx, n_rx, n_sc, (r + offset).astype(np.complex128), sample_rate_hz), offset
