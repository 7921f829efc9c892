import collections
import dataclasses
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
from typing_extensions import Literal

from . import export
from .classify import (
    ClassifierModel,
    ConfusionMatrix,
    MetricsReport,
    TrainConfig,
    evaluate,
    save_model,
    stratified_split,
    train,
    write_metrics,
)
from .csi import (
    CsiFrame,
    LabeledFrame,
    amplitude,
    check_consistent_shapes,
    default_subcarrier_index,
    phase,
    sanitize_phase,
    sanitized_phase_basis,
)
from .errors import ValidationError
from .features import fuse, summarize, summary_names
from .hdfm import HdfmConfig, constant_rows, fit_factor_count, pca_compress
from .types import ClassifierKind, PhaseMethod, RealMatrix

logger = logging.getLogger(__name__)

STREAMS = ("amplitude", "phase")
MIN_SELECTABLE_ROWS = 4


@dataclass(frozen=True)
class PipelineConfig:
    hdfm: HdfmConfig = HdfmConfig()
    baseline: Literal["hdfm", "pca"] = "hdfm"
    p: Optional[int] = None
    classifier: ClassifierKind = "multinomial_logistic"
    train: TrainConfig = TrainConfig()
    test_fraction: float = 0.2
    center: bool = True
    phase_method: PhaseMethod = "least_squares"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.baseline not in ("hdfm", "pca"):
            raise ValueError(f"Unknown baseline {self.baseline!r}")
        if self.baseline == "pca" and (self.p is None or self.p < 1):
            raise ValueError("The PCA baseline needs a fixed p >= 1")


@dataclass(frozen=True, eq=False)
class PipelineResult:
    p: int
    frame_levels: tuple[dict[str, Any], ...]
    labels: tuple[str, ...]
    sample_ids: tuple[str, ...]
    features: RealMatrix
    train_idx: npt.NDArray[np.int64]
    test_idx: npt.NDArray[np.int64]
    model: ClassifierModel
    report: MetricsReport
    confusion: ConfusionMatrix


def stream_matrices(
    frame: CsiFrame, center: bool = True, method: PhaseMethod = "least_squares"
) -> dict[str, RealMatrix]:
    index = default_subcarrier_index(frame.n_sc)
    basis = sanitized_phase_basis(index, frame.n_tx * frame.n_rx, method)
    matrices = {
        "amplitude": amplitude(frame),
        "phase": basis.T @ sanitize_phase(phase(frame), index, method),
    }
    if center:
        matrices = {
            name: m - m.mean(axis=1, keepdims=True) for name, m in matrices.items()
        }
    return matrices


def _is_degenerate(matrix: RealMatrix) -> bool:
    return len(constant_rows(matrix)) == matrix.shape[0]


def _selectable(matrix: RealMatrix) -> bool:
    return matrix.shape[0] >= MIN_SELECTABLE_ROWS and not _is_degenerate(matrix)


def _most_common(levels: Sequence[int]) -> int:
    tally = collections.Counter(levels)
    return min(tally, key=lambda p: (-tally[p], p))


def select_levels(
    matrices: Sequence[dict[str, RealMatrix]], config: HdfmConfig, threads: int = 1
) -> list[dict[str, Optional[int]]]:
    def fit(streams: dict[str, RealMatrix]) -> dict[str, Optional[int]]:
        levels: dict[str, Optional[int]] = {}
        for name in STREAMS:
            m = streams[name]
            if not _selectable(m):
                levels[name] = None
                continue
            local = dataclasses.replace(config, p_max=min(config.p_max, m.shape[0] - 1), threads=1)
            levels[name] = fit_factor_count(m, local).p_hat
        return levels

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fit, matrices))
    return [fit(m) for m in matrices]


def frame_features(streams: dict[str, RealMatrix], p: int) -> npt.NDArray[np.float64]:
    blocks = []
    for name in STREAMS:
        m = streams[name]
        if _is_degenerate(m) or m.shape[0] < max(p, MIN_SELECTABLE_ROWS):
            blocks.append(np.zeros((p, m.shape[1])))
        else:
            blocks.append(pca_compress(m, p))
    return summarize(fuse(*blocks).matrix)


def run_pipeline(
    frames: Sequence[LabeledFrame], config: PipelineConfig = PipelineConfig()
) -> PipelineResult:
    if not frames:
        raise ValidationError("Empty dataset")
    check_consistent_shapes(frames)
    labels = tuple(f.label for f in frames)
    if len(set(labels)) < 2:
        raise ValidationError(f"Need at least 2 classes, got {sorted(set(labels))}")

    matrices = [stream_matrices(f.frame, config.center, config.phase_method) for f in frames]
    streams_alive = [
        name for name in STREAMS if any(_selectable(m[name]) for m in matrices)
    ]
    for name in STREAMS:
        if name in streams_alive:
            continue
        if all(_is_degenerate(m[name]) for m in matrices):
            logger.warning("%s stream is constant in every frame; contributing zeros", name)
        else:
            logger.warning(
                "%s stream has fewer than %d usable rows; contributing zeros",
                name,
                MIN_SELECTABLE_ROWS,
            )

    if config.baseline == "pca":
        assert config.p is not None
        p = config.p
        frame_levels = tuple(
            {"label": f.label, "sample_id": f.sample_id, "amplitude": p, "phase": p}
            for f in frames
        )
    else:
        levels = select_levels(matrices, config.hdfm, config.hdfm.threads)
        per_stream = {
            name: _most_common([lv[name] for lv in levels if lv[name] is not None])  # type: ignore[misc]
            for name in streams_alive
        }
        # amplitude leads; phase decides only when amplitude carries nothing
        p = next((per_stream[name] for name in STREAMS if name in per_stream), 0)
        logger.info("Dataset factor counts %s; using p=%d", per_stream, p)
        frame_levels = tuple(
            {"label": f.label, "sample_id": f.sample_id, **lv}
            for f, lv in zip(frames, levels)
        )
        if p == 0:
            raise ValidationError("HDFM selected no factors in any stream; nothing to classify")

    features = np.stack([frame_features(m, p) for m in matrices])
    train_idx, test_idx = stratified_split(labels, config.test_fraction, config.seed)
    model = train(
        features[train_idx],
        [labels[i] for i in train_idx],
        config.classifier,
        config.train,
    )
    report, cm = evaluate(model, features[test_idx], [labels[i] for i in test_idx])
    logger.info(
        "Test accuracy %.4f (macro F1 %.4f) on %d frames", report.accuracy, report.f1, len(test_idx)
    )
    return PipelineResult(
        p=p,
        frame_levels=frame_levels,
        labels=labels,
        sample_ids=tuple(f.sample_id for f in frames),
        features=features,
        train_idx=train_idx,
        test_idx=test_idx,
        model=model,
        report=report,
        confusion=cm,
    )


def write_features_table(
    path: export.PathLike,
    features: RealMatrix,
    labels: Sequence[str],
    sample_ids: Optional[Sequence[str]] = None,
) -> Path:
    rows = features.shape[1] // 6
    columns: dict[str, Any] = {"label": list(labels)}
    if sample_ids is not None:
        columns["sample_id"] = list(sample_ids)
    for name, values in zip(summary_names(rows), features.T):
        columns[name] = values
    return export.write_table(path, columns)


def read_features_table(path: export.PathLike) -> tuple[RealMatrix, list[str]]:
    table = export.read_table(path)
    if "label" not in table.columns:
        raise ValidationError(f"{path}: features table has no label column")
    values = table.drop(columns=[c for c in ("label", "sample_id") if c in table.columns])
    return values.to_numpy(dtype=np.float64), [str(x) for x in table["label"]]


def write_pipeline(result: PipelineResult, out_dir: export.PathLike) -> list[Path]:
    out = Path(out_dir)
    outputs = write_metrics(result.report, result.confusion, out)
    outputs.append(
        write_features_table(out / "features.csv", result.features, result.labels, result.sample_ids)
    )
    # -1 marks a stream that was constant in that frame
    outputs.append(
        export.write_table(
            out / "frame_levels.csv",
            {
                "label": [lv["label"] for lv in result.frame_levels],
                "sample_id": [lv["sample_id"] for lv in result.frame_levels],
                **{
                    name: [-1 if lv[name] is None else lv[name] for lv in result.frame_levels]
                    for name in STREAMS
                },
            },
        )
    )
    test = set(result.test_idx.tolist())
    outputs.append(
        export.write_table(
            out / "split.csv",
            {
                "sample_id": list(result.sample_ids),
                "subset": ["test" if i in test else "train" for i in range(len(result.sample_ids))],
            },
        )
    )
    outputs.append(save_model(result.model, out / "model.bin"))
    return outputs
