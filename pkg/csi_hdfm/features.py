import logging
from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
import scipy.signal
import scipy.stats

from . import export
from .errors import ValidationError
from .types import RealMatrix, RealVector, count, real_matrix, real_vector

logger = logging.getLogger(__name__)

DB_FLOOR = -120.0
MAGNITUDE_EPSILON = 1e-12
SUMMARY_STATS = ("mean", "std", "min", "max", "iqr", "mean_abs_diff")


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 256
    hop_len: int = 64
    nfft: int = 256
    sample_rate_hz: float = 1000.0
    window: str = "hann"
    detrend: bool = True

    def __post_init__(self) -> None:
        count(self.window_len, "window_len", minimum=1)
        count(self.hop_len, "hop_len", minimum=1)
        count(self.nfft, "nfft", minimum=1)
        if self.nfft < self.window_len:
            raise ValueError(f"nfft={self.nfft} must be >= window_len={self.window_len}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")


@dataclass(frozen=True, eq=False)
class Spectrogram:
    magnitude_db: RealMatrix
    sample_rate_hz: float
    window_len: int
    hop_len: int
    nfft: int

    @property
    def freq_bins(self) -> int:
        return self.magnitude_db.shape[0]

    @property
    def time_frames(self) -> int:
        return self.magnitude_db.shape[1]

    @property
    def frequencies(self) -> RealVector:
        return np.fft.rfftfreq(self.nfft, d=1.0 / self.sample_rate_hz)

    @property
    def times(self) -> RealVector:
        """Frame centres in seconds."""
        starts = np.arange(self.time_frames) * self.hop_len
        return (starts + self.window_len / 2) / self.sample_rate_hz

    def image(self) -> npt.NDArray[np.uint8]:
        """8-bit rendering, [floor, max] dB mapped linearly, low frequencies at the bottom."""
        top = float(self.magnitude_db.max()) if self.magnitude_db.size else DB_FLOOR
        if top <= DB_FLOOR:
            return np.zeros(self.magnitude_db.shape, dtype=np.uint8)[::-1]
        scaled = (self.magnitude_db - DB_FLOOR) / (top - DB_FLOOR) * 255.0
        return np.round(np.clip(scaled, 0, 255)).astype(np.uint8)[::-1]


def stft(
    signal: Any,
    window_len: int = 256,
    hop_len: int = 64,
    nfft: int = 256,
    sample_rate_hz: float = 1000.0,
    window: str = "hann",
    detrend: bool = True,
) -> Spectrogram:
    StftConfig(window_len, hop_len, nfft, sample_rate_hz, window, detrend)
    x = real_vector(signal, "signal")
    if x.shape[0] < window_len:
        raise ValueError(f"Signal of length {x.shape[0]} is shorter than the window ({window_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop_len]
    if detrend:
        frames = frames - frames.mean(axis=1, keepdims=True)
    taper = scipy.signal.get_window(window, window_len)
    spectrum = np.fft.rfft(frames * taper, n=nfft, axis=1).T
    magnitude_db = np.maximum(
        20 * np.log10(np.abs(spectrum) + MAGNITUDE_EPSILON), DB_FLOOR
    )
    return Spectrogram(magnitude_db, float(sample_rate_hz), window_len, hop_len, nfft)


@dataclass(frozen=True, eq=False)
class FusedFeatures:
    matrix: RealMatrix

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] % 2:
            raise ValidationError(
                f"Fused features need an even row count, got shape {self.matrix.shape}"
            )

    @property
    def p(self) -> int:
        return self.matrix.shape[0] // 2

    @property
    def t(self) -> int:
        return self.matrix.shape[1]


def fuse(amp_factors: Any, phase_factors: Any) -> FusedFeatures:
    amp = np.asarray(amp_factors, dtype=np.float64)
    ph = np.asarray(phase_factors, dtype=np.float64)
    if amp.ndim != 2 or amp.shape != ph.shape:
        raise ValidationError(
            f"Amplitude factors {amp.shape} and phase factors {ph.shape} differ in shape"
        )
    return FusedFeatures(np.vstack([amp, ph]))


def unstack(fused: FusedFeatures) -> tuple[RealMatrix, RealMatrix]:
    return fused.matrix[: fused.p], fused.matrix[fused.p :]


def summarize(features: Any) -> RealVector:
    values = real_matrix(features, "features")
    if values.shape[1] < 8:
        raise ValueError(f"summarize needs T >= 8, got {values.shape[1]}")
    stats = np.column_stack(
        [
            values.mean(axis=1),
            values.std(axis=1),
            values.min(axis=1),
            values.max(axis=1),
            scipy.stats.iqr(values, axis=1),
            np.abs(np.diff(values, axis=1)).mean(axis=1),
        ]
    )
    return stats.ravel()


def summary_names(rows: int, prefix: str = "f") -> list[str]:
    return [f"{prefix}{i}_{stat}" for i in range(rows) for stat in SUMMARY_STATS]


def write_spectrogram_csv(path: export.PathLike, spectrogram: Spectrogram) -> None:
    export.write_matrix(path, spectrogram.magnitude_db)


def write_spectrogram_pgm(path: export.PathLike, spectrogram: Spectrogram) -> None:
    export.write_pgm(path, spectrogram.image())
