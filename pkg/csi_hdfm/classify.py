import json
import logging
import struct
from collections.abc import Hashable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
import scipy.special
import sklearn.metrics
import sklearn.model_selection
import sklearn.preprocessing

from . import export
from .errors import CorruptionError, FormatError, ValidationError
from .types import CLASSIFIER_KINDS, ClassifierKind, RealMatrix, RealVector, count, real_matrix

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CSIM"
MODEL_VERSION = 1
# magic, version, kind, k, d, label bytes
MODEL_HEADER = struct.Struct("<4sHHIII")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    labels: tuple[Hashable, ...]
    counts: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        k = len(self.labels)
        if self.counts.shape != (k, k):
            raise ValidationError(f"Confusion counts {self.counts.shape} do not match {k} labels")
        if np.any(self.counts < 0):
            raise ValidationError("Confusion counts must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    label: Hashable
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: tuple[ClassMetrics, ...]

    def as_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "averaging": "macro",
            "per_class": [
                {
                    "label": str(m.label),
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for m in self.per_class
            ],
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        count(self.epochs, "epochs")
        if not self.l2 >= 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    kind: ClassifierKind
    labels: tuple[str, ...]
    mean: RealVector
    scale: RealVector
    # centroids (nearest_centroid) or class weights (multinomial_logistic), k x d
    weights: RealMatrix
    bias: RealVector

    def __post_init__(self) -> None:
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"Unknown classifier kind {self.kind!r}")
        k, d = len(self.labels), self.mean.shape[0]
        if (
            self.scale.shape != (d,)
            or self.weights.shape != (k, d)
            or self.bias.shape != (k,)
        ):
            raise ValidationError(
                f"Model parameter shapes do not match {k} classes x {d} features"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def confusion(
    true_labels: Sequence[Hashable],
    predicted_labels: Sequence[Hashable],
    labels: Optional[Sequence[Hashable]] = None,
) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise ValidationError(
            f"{len(true_labels)} true labels vs {len(predicted_labels)} predictions"
        )
    if len(true_labels) == 0:
        raise ValidationError("Cannot build a confusion matrix from no samples")
    declared = tuple(labels) if labels is not None else tuple(
        sorted(set(true_labels) | set(predicted_labels))  # type: ignore[type-var]
    )
    known = set(declared)
    unknown = sorted({str(x) for x in (*true_labels, *predicted_labels) if x not in known})
    if unknown:
        raise ValidationError(f"Unknown labels: {', '.join(unknown)}")
    counts = sklearn.metrics.confusion_matrix(
        list(true_labels), list(predicted_labels), labels=list(declared)
    )
    return ConfusionMatrix(declared, counts.astype(np.int64))


def counts_metrics(tp: float, fp: float, fn: float, tn: float) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1) from one-vs-rest counts; 0 on zero denominators."""
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    total = cm.total
    if cm.k == 0 or total == 0:
        raise ValidationError("Cannot compute metrics on an empty confusion matrix")
    per_class = []
    for c, label in enumerate(cm.labels):
        tp = int(cm.counts[c, c])
        fp = int(cm.counts[:, c].sum()) - tp
        fn = int(cm.counts[c, :].sum()) - tp
        _, precision, recall, f1 = counts_metrics(tp, fp, fn, total - tp - fp - fn)
        per_class.append(ClassMetrics(label, precision, recall, f1, tp + fn))
    return MetricsReport(
        accuracy=float(np.trace(cm.counts)) / total,
        precision=float(np.mean([m.precision for m in per_class])),
        recall=float(np.mean([m.recall for m in per_class])),
        f1=float(np.mean([m.f1 for m in per_class])),
        per_class=tuple(per_class),
    )


def _standardize(model: ClassifierModel, features: RealMatrix) -> RealMatrix:
    return (features - model.mean) / model.scale


def scores(model: ClassifierModel, features: Any) -> RealMatrix:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValidationError(
            f"Feature dimension {x.shape[-1]} does not match model dimension {model.dim}"
        )
    if not np.all(np.isfinite(x)):
        raise ValidationError("Features contain non-finite values")
    z = _standardize(model, x)
    if model.kind == "nearest_centroid":
        return -((z[:, None, :] - model.weights[None, :, :]) ** 2).sum(axis=2)
    return z @ model.weights.T + model.bias


def train(
    features: Any,
    labels: Sequence[str],
    kind: ClassifierKind = "multinomial_logistic",
    config: TrainConfig = TrainConfig(),
) -> ClassifierModel:
    x = real_matrix(features, "features")
    if x.shape[0] != len(labels):
        raise ValidationError(f"{x.shape[0]} feature vectors vs {len(labels)} labels")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ValidationError(f"Need at least 2 classes to train, got {len(classes)}")
    if kind not in CLASSIFIER_KINDS:
        raise ValueError(f"Unknown classifier kind {kind!r}")

    scaler = sklearn.preprocessing.StandardScaler().fit(x)
    mean, scale = scaler.mean_, scaler.scale_
    z = scaler.transform(x)
    y = np.array([classes.index(label) for label in labels])
    onehot = np.eye(len(classes))[y]

    if kind == "nearest_centroid":
        weights = np.stack([z[y == c].mean(axis=0) for c in range(len(classes))])
        bias = np.zeros(len(classes))
    else:
        rng = np.random.default_rng(config.seed)
        weights = rng.normal(0.0, 0.01, size=(len(classes), x.shape[1]))
        bias = np.zeros(len(classes))
        for _ in range(config.epochs):
            probs = scipy.special.softmax(z @ weights.T + bias, axis=1)
            grad = (probs - onehot) / len(y)
            weights = weights - config.learning_rate * (grad.T @ z + config.l2 * weights)
            bias = bias - config.learning_rate * grad.sum(axis=0)

    model = ClassifierModel(kind, tuple(str(c) for c in classes), mean, scale, weights, bias)
    logger.info(
        "Trained %s on %d samples, %d features, %d classes",
        kind,
        x.shape[0],
        x.shape[1],
        len(classes),
    )
    return model


def predict_many(model: ClassifierModel, features: Any) -> list[str]:
    # argmax picks the smallest class index on ties
    return [model.labels[i] for i in np.argmax(scores(model, features), axis=1)]


def predict(model: ClassifierModel, feature: Any) -> str:
    vector = np.asarray(feature, dtype=np.float64)
    if vector.ndim != 1:
        raise ValidationError(f"Expected a single feature vector, got shape {vector.shape}")
    return predict_many(model, vector[None, :])[0]


def evaluate(
    model: ClassifierModel, features: Any, labels: Sequence[str]
) -> tuple[MetricsReport, ConfusionMatrix]:
    if len(labels) == 0:
        raise ValidationError("Empty test set")
    cm = confusion(labels, predict_many(model, features), model.labels)
    return metrics(cm), cm


def stratified_split(
    labels: Sequence[Hashable], test_fraction: float = 0.2, seed: int = 0
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(labels)
    k = len(set(labels))
    # every class gets at least one test sample
    test_size = min(max(int(round(n * test_fraction)), k), n - k)
    try:
        train_idx, test_idx = sklearn.model_selection.train_test_split(
            np.arange(n),
            test_size=test_size,
            stratify=[str(label) for label in labels],
            random_state=seed,
        )
    except ValueError as exc:
        raise ValidationError(f"Cannot stratify {n} samples over {k} classes: {exc}") from exc
    return np.sort(train_idx).astype(np.int64), np.sort(test_idx).astype(np.int64)


def model_to_bytes(model: ClassifierModel) -> bytes:
    names = json.dumps(list(model.labels)).encode("utf-8")
    header = MODEL_HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        CLASSIFIER_KINDS.index(model.kind),
        len(model.labels),
        model.dim,
        len(names),
    )
    arrays = [model.mean, model.scale, model.weights.ravel(), model.bias]
    return header + names + b"".join(a.astype("<f8").tobytes() for a in arrays)


def model_from_bytes(blob: bytes) -> ClassifierModel:
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"Bad model magic {blob[:4]!r}")
    if len(blob) < MODEL_HEADER.size:
        raise CorruptionError("Truncated model header")
    _, version, kind_code, k, d, name_len = MODEL_HEADER.unpack_from(blob)
    if version != MODEL_VERSION:
        raise FormatError(f"Unsupported model version {version}")
    if kind_code >= len(CLASSIFIER_KINDS):
        raise FormatError(f"Unknown classifier kind code {kind_code}")
    start = MODEL_HEADER.size + name_len
    expected = start + 8 * (2 * d + k * d + k)
    if len(blob) != expected:
        raise CorruptionError(f"Model blob has {len(blob)} bytes, expected {expected}")
    labels = tuple(json.loads(blob[MODEL_HEADER.size : start].decode("utf-8")))
    values = np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64)
    mean, scale = values[:d], values[d : 2 * d]
    weights = values[2 * d : 2 * d + k * d].reshape(k, d)
    bias = values[2 * d + k * d :]
    return ClassifierModel(CLASSIFIER_KINDS[kind_code], labels, mean, scale, weights, bias)


def save_model(model: ClassifierModel, path: export.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path: export.PathLike) -> ClassifierModel:
    return model_from_bytes(Path(path).read_bytes())


def write_metrics(
    report: MetricsReport, cm: ConfusionMatrix, out_dir: export.PathLike
) -> list[Path]:
    out = Path(out_dir)
    names = [str(label) for label in cm.labels]
    confusion_path = out / "confusion.csv"
    confusion_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(cm.counts, index=pd.Index(names, name="true"), columns=names).to_csv(
        confusion_path
    )
    return [
        export.write_json(
            out / "metrics.json",
            {**report.as_dict(), "confusion": {"labels": names, "counts": cm.counts}},
        ),
        export.write_table(
            out / "metrics.csv",
            {
                "label": names,
                "precision": [m.precision for m in report.per_class],
                "recall": [m.recall for m in report.per_class],
                "f1": [m.f1 for m in report.per_class],
                "support": [m.support for m in report.per_class],
            },
        ),
        confusion_path,
    ]
