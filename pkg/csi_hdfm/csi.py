import collections
import logging
import os
import struct
import tempfile
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np
import numpy.typing as npt
import scipy.linalg

from .errors import CorruptionError, FormatError, ValidationError
from .types import ComplexMatrix, PhaseMethod, RealMatrix, count, real_matrix

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

CSIF_MAGIC = b"CSIF"
CSIF_VERSION = 1
# magic, version, n_tx, n_rx, n_sc, t, sample_rate_hz
CSIF_HEADER = struct.Struct("<4sHHHHId")
_ENTRY_DTYPE = np.dtype("<c16")

INTEL_5300_SUBCARRIERS: tuple[int, ...] = (
    *range(-28, 0, 2),
    -1,
    *range(1, 28, 2),
    28,
)


@dataclass(frozen=True, eq=False)
class CsiFrame:
    n_tx: int
    n_rx: int
    n_sc: int
    data: ComplexMatrix
    sample_rate_hz: float = 1000.0

    def __post_init__(self) -> None:
        for name in ("n_tx", "n_rx", "n_sc"):
            count(getattr(self, name), name, minimum=1)
        data = np.array(self.data, dtype=np.complex128, copy=True)
        if data.ndim != 2:
            raise ValidationError(f"CSI data must be N x T, got shape {data.shape}")
        if data.shape[0] != self.n_tx * self.n_rx * self.n_sc:
            raise ValidationError(
                f"CSI data has {data.shape[0]} rows, expected"
                f" {self.n_tx} x {self.n_rx} x {self.n_sc} = {self.n_tx * self.n_rx * self.n_sc}"
            )
        if data.shape[1] < 2:
            raise ValidationError(f"CSI frame needs at least 2 packets, got {data.shape[1]}")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"Non-finite CSI value at row {bad[0]}, packet {bad[1]}")
        if not (np.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> int:
        return self.data.shape[1]

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return (self.n_tx, self.n_rx, self.n_sc, self.t)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, CsiFrame):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.sample_rate_hz == other.sample_rate_hz
            and self.data.astype(_ENTRY_DTYPE).tobytes()
            == other.data.astype(_ENTRY_DTYPE).tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LabeledFrame:
    frame: CsiFrame
    label: str
    sample_id: str = "0"

    def __post_init__(self) -> None:
        if not self.label:
            raise ValidationError("Frame label must be nonempty")


@dataclass(frozen=True, eq=False)
class PhaseQuality:
    zero_mask: npt.NDArray[np.bool_]
    zero_count: int = field(init=False)
    zero_fraction: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "zero_count", int(self.zero_mask.sum()))
        object.__setattr__(
            self, "zero_fraction", self.zero_count / max(self.zero_mask.size, 1)
        )

    @property
    def ok(self) -> bool:
        return self.zero_count == 0

    def as_dict(self) -> dict[str, Any]:
        rows = sorted({int(r) for r in np.nonzero(self.zero_mask)[0]})
        return {
            "zero_count": self.zero_count,
            "zero_fraction": self.zero_fraction,
            "rows_with_zeros": rows,
        }


def _encode_header(frame: CsiFrame) -> bytes:
    return CSIF_HEADER.pack(
        CSIF_MAGIC,
        CSIF_VERSION,
        frame.n_tx,
        frame.n_rx,
        frame.n_sc,
        frame.t,
        frame.sample_rate_hz,
    )


def _decode_header(raw: bytes, path: PathLike) -> tuple[int, int, int, int, float]:
    if raw[:4] != CSIF_MAGIC:
        raise FormatError(f"{os.fspath(path)}: bad magic {bytes(raw[:4])!r}")
    if len(raw) < CSIF_HEADER.size:
        raise CorruptionError(f"{os.fspath(path)}: truncated CSIF header")
    magic, version, n_tx, n_rx, n_sc, t, rate = CSIF_HEADER.unpack_from(raw)
    if magic != CSIF_MAGIC:
        raise FormatError(f"{os.fspath(path)}: bad magic {magic!r}")
    if version != CSIF_VERSION:
        raise FormatError(f"{os.fspath(path)}: unsupported CSIF version {version}")
    return n_tx, n_rx, n_sc, t, rate


def store_frame(frame: CsiFrame, path: PathLike) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(frame.data, dtype=_ENTRY_DTYPE).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_encode_header(frame))
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug("Stored %s (%d x %d)", path, frame.n, frame.t)


def load_frame(path: PathLike) -> CsiFrame:
    raw = Path(path).read_bytes()
    n_tx, n_rx, n_sc, t, rate = _decode_header(raw, path)
    n = n_tx * n_rx * n_sc
    payload = memoryview(raw)[CSIF_HEADER.size :]
    expected = n * t * _ENTRY_DTYPE.itemsize
    if len(payload) != expected:
        raise CorruptionError(
            f"{os.fspath(path)}: header declares {n} x {t} entries ({expected} bytes),"
            f" payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype=_ENTRY_DTYPE).reshape(n, t)
    frame = CsiFrame(n_tx, n_rx, n_sc, data, rate)
    logger.debug("Loaded %s (%d x %d)", path, n, t)
    return frame


def read_geometry(path: PathLike) -> tuple[int, int, int, int, float]:
    """(n_tx, n_rx, n_sc, t, sample_rate_hz) from a CSIF header alone."""
    with Path(path).open("rb") as fh:
        return _decode_header(fh.read(CSIF_HEADER.size), path)


def iter_row_blocks(
    path: PathLike, block_rows: int = 30
) -> Iterator[tuple[int, ComplexMatrix]]:
    count(block_rows, "block_rows", minimum=1)
    path = Path(path)
    n_tx, n_rx, n_sc, t, _ = read_geometry(path)
    n = n_tx * n_rx * n_sc
    expected = CSIF_HEADER.size + n * t * _ENTRY_DTYPE.itemsize
    if path.stat().st_size != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes, found {path.stat().st_size}"
        )
    mapped = np.memmap(
        path, dtype=_ENTRY_DTYPE, mode="r", offset=CSIF_HEADER.size, shape=(n, t)
    )
    try:
        for start in range(0, n, block_rows):
            block = np.array(mapped[start : start + block_rows], dtype=np.complex128)
            if not np.all(np.isfinite(block)):
                raise ValidationError(f"{path}: non-finite value in rows {start}..")
            yield start, block
    finally:
        del mapped


def amplitude(frame: CsiFrame) -> RealMatrix:
    return np.abs(frame.data)


def phase_quality(frame: CsiFrame) -> PhaseQuality:
    return PhaseQuality(frame.data == 0)


def phase(frame: CsiFrame) -> RealMatrix:
    return phase_of(frame.data)


def phase_of(data: ComplexMatrix) -> RealMatrix:
    angles = np.angle(data)
    # (-pi, pi]: atan2 yields -pi for negative reals with a -0.0 imaginary part
    angles[angles == -np.pi] = np.pi
    zeros = data == 0
    if zeros.any():
        angles[zeros] = 0.0
        logger.warning(
            "%d zero-magnitude CSI entries; phase set to 0", int(zeros.sum())
        )
    return angles


def default_subcarrier_index(n_sc: int) -> npt.NDArray[np.int64]:
    if n_sc == len(INTEL_5300_SUBCARRIERS):
        return np.array(INTEL_5300_SUBCARRIERS, dtype=np.int64)
    return np.arange(n_sc, dtype=np.int64)


def sanitize_phase(
    phase: Any,
    subcarrier_index: Sequence[int],
    method: PhaseMethod = "two_point",
) -> RealMatrix:
    values = real_matrix(phase, "phase")
    k = np.asarray(subcarrier_index, dtype=np.float64)
    if k.ndim != 1:
        raise ValueError("subcarrier_index must be a vector")
    n_sc = k.shape[0]
    if n_sc < 2:
        raise ValueError(f"Need at least 2 subcarriers to fit a line, got {n_sc}")
    if not np.all(np.diff(k) > 0):
        raise ValueError("subcarrier_index must be strictly increasing")
    rows, t = values.shape
    if rows % n_sc:
        raise ValidationError(
            f"{rows} phase rows do not split into blocks of {n_sc} subcarriers"
        )

    blocks = np.unwrap(values.reshape(rows // n_sc, n_sc, t), axis=1)
    kk = k[None, :, None]
    if method == "two_point":
        slope = (blocks[:, -1, :] - blocks[:, 0, :]) / (k[-1] - k[0])
        detrended = blocks - slope[:, None, :] * kk
        offset = detrended.mean(axis=1)
        cleaned = detrended - offset[:, None, :]
    elif method == "least_squares":
        kc = k - k.mean()
        slope = np.einsum("i,bit->bt", kc, blocks) / np.dot(kc, kc)
        offset = blocks.mean(axis=1) - slope * k.mean()
        cleaned = blocks - slope[:, None, :] * kk - offset[:, None, :]
    else:
        raise ValueError(f"Unknown phase sanitization method {method!r}")
    return cleaned.reshape(rows, t)


def sanitized_phase_basis(
    subcarrier_index: Sequence[int], blocks: int, method: PhaseMethod = "two_point"
) -> RealMatrix:
    """Orthonormal basis of the subspace that ``sanitize_phase`` maps onto.

    Sanitization removes two directions from every block of subcarriers,
    so its output has rank at most ``rows - 2 * blocks``.  ``basis.T @ cleaned``
    drops those structurally empty directions without losing information.
    """
    k = np.asarray(subcarrier_index, dtype=np.float64)
    n_sc = k.shape[0]
    count(blocks, "blocks", minimum=1)
    if method == "two_point":
        edges = np.zeros(n_sc)
        edges[0], edges[-1] = 1.0, -1.0
        constraints = np.stack([np.ones(n_sc), edges])
    elif method == "least_squares":
        constraints = np.stack([np.ones(n_sc), k])
    else:
        raise ValueError(f"Unknown phase sanitization method {method!r}")
    if n_sc <= 2:
        return np.zeros((n_sc * blocks, 0))
    per_block = scipy.linalg.null_space(constraints)
    return scipy.linalg.block_diag(*[per_block] * blocks)


def iter_channel_blocks(
    path: PathLike,
    channel: str = "amplitude",
    method: PhaseMethod = "least_squares",
    reduced: bool = False,
) -> Iterator[tuple[int, RealMatrix]]:
    """Amplitude or sanitized phase of a CSIF file, one antenna pair at a time.

    Offsets count rows of the full matrix.  With ``reduced`` each phase
    block is projected onto ``sanitized_phase_basis`` and so has two
    fewer rows.
    """
    if channel not in ("amplitude", "phase"):
        raise ValueError(f"Unknown channel {channel!r}")
    n_sc = read_geometry(path)[2]
    index = default_subcarrier_index(n_sc)
    basis = sanitized_phase_basis(index, 1, method) if reduced else None
    for start, block in iter_row_blocks(path, block_rows=n_sc):
        if channel == "amplitude":
            yield start, np.abs(block)
            continue
        cleaned = sanitize_phase(phase_of(block), index, method)
        yield start, cleaned if basis is None else basis.T @ cleaned


def save_dataset(root: PathLike, frames: Iterable[LabeledFrame]) -> list[Path]:
    root = Path(root)
    written = []
    for item in frames:
        path = root / item.label / f"{item.sample_id}.csif"
        store_frame(item.frame, path)
        written.append(path)
    return written


def load_dataset(root: PathLike) -> list[LabeledFrame]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")
    frames = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(label_dir.glob("*.csif")):
            frames.append(LabeledFrame(load_frame(path), label_dir.name, path.stem))
    logger.info("Loaded %d frames from %s", len(frames), root)
    return frames


def check_consistent_shapes(frames: Sequence[LabeledFrame]) -> tuple[int, int, int, int]:
    if not frames:
        raise ValidationError("Empty dataset")
    shapes = collections.Counter(f.frame.geometry for f in frames)
    expected = shapes.most_common(1)[0][0]
    offenders = [
        f"{f.label}/{f.sample_id} {f.frame.geometry}"
        for f in frames
        if f.frame.geometry != expected
    ]
    if offenders:
        raise ValidationError(
            f"Inconsistent frame shapes (expected (n_tx, n_rx, n_sc, t) = {expected}): "
            + "; ".join(offenders)
        )
    return expected
