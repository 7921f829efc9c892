import dataclasses
import hashlib
import json
import logging
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from .types import RealMatrix

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

# round-trip exact, so re-runs are byte-identical
FLOAT_FORMAT = "%.17g"


def write_table(path: PathLike, columns: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(dict(columns)).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug("Wrote %s", path)
    return path


def write_matrix(path: PathLike, matrix: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(np.asarray(matrix, dtype=np.float64)).to_csv(
        path, header=False, index=False, float_format=FLOAT_FORMAT
    )
    logger.debug("Wrote %s", path)
    return path


def read_matrix(path: PathLike) -> RealMatrix:
    path = Path(path)
    if path.stat().st_size == 0:
        return np.zeros((0, 0))
    return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(Path(path))


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return dataclasses.asdict(value)
    raise TypeError(f"Can't serialize type {type(value)}")


def to_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(path: PathLike, value: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(value))
    logger.debug("Wrote %s", path)
    return path


def write_pgm(path: PathLike, image: npt.NDArray[np.uint8]) -> Path:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM image must be a 2-D uint8 array, got {image.dtype} {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = image.shape
    with path.open("wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())
    logger.debug("Wrote %s", path)
    return path


def read_pgm(path: PathLike) -> npt.NDArray[np.uint8]:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: unsupported PGM header")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
