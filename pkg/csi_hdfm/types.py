from typing import Any

import numpy as np
import numpy.typing as npt
from typing_extensions import Literal, TypeAlias

from .errors import ValidationError

RealMatrix: TypeAlias = npt.NDArray[np.float64]
ComplexMatrix: TypeAlias = npt.NDArray[np.complex128]
RealVector: TypeAlias = npt.NDArray[np.float64]

Metric: TypeAlias = Literal["wasserstein1", "kolmogorov_smirnov"]
Reference: TypeAlias = Literal["analytic_mp", "monte_carlo"]
ClassifierKind: TypeAlias = Literal["nearest_centroid", "multinomial_logistic"]
PhaseMethod: TypeAlias = Literal["two_point", "least_squares"]

METRICS: tuple[Metric, ...] = ("wasserstein1", "kolmogorov_smirnov")
REFERENCES: tuple[Reference, ...] = ("analytic_mp", "monte_carlo")
CLASSIFIER_KINDS: tuple[ClassifierKind, ...] = (
    "nearest_centroid",
    "multinomial_logistic",
)


def real_matrix(value: Any, name: str = "matrix") -> RealMatrix:
    if isinstance(value, np.ndarray) and np.iscomplexobj(value):
        raise TypeError(f"{name} must be real, got dtype {value.dtype}")
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def real_vector(value: Any, name: str = "vector") -> RealVector:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def count(value: Any, name: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(value)}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
