"""Metrics for epoch classification and continuous sliding-window onset
detection with latency accounting."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .data import ContinuousRecord, EpochSet
from .model import MsnnModel
from .training import predict_probs


@dataclasses.dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    def normalized(self) -> np.ndarray:
        """Row-normalized view; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros(self.counts.shape, dtype=np.float64)
        np.divide(self.counts, sums, out=out, where=sums > 0)
        return out

    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")


@dataclasses.dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    precision: np.ndarray  # per class; 0 where the class was never predicted
    recall: np.ndarray  # per class; 0 where the class never occurred
    n_samples: int

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "n_samples": self.n_samples,
        }


def evaluate(model: MsnnModel, test: EpochSet, batch_size: int = 64) -> EvalResult:
    """Accuracy, confusion matrix and per-class precision/recall.

    Probability ties break toward the lowest class index.
    """
    n_classes = model.config.n_classes
    if test.n_classes != n_classes:
        raise ValueError(
            f"test set has {test.n_classes} classes, model expects {n_classes}"
        )
    probs = predict_probs(model, test.epochs[..., None], batch_size)
    preds = probs.argmax(axis=1)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (test.labels, preds), 1)
    confusion = ConfusionMatrix(counts)
    diag = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros(n_classes), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(n_classes), where=row > 0)
    return EvalResult(
        accuracy=float((preds == test.labels).mean()),
        confusion=confusion,
        precision=precision,
        recall=recall,
        n_samples=test.n_trials,
    )


def sliding_window_trace(
    model: MsnnModel,
    record: ContinuousRecord,
    stride_samples: int = 1,
    positive_class: int = 1,
    batch_size: int = 128,
) -> np.ndarray:
    """Positive-class probability for every window position of a record.

    The window is the model's configured epoch length, so position i covers
    samples [i*stride, i*stride + n_T). The record must already carry the
    frozen training-time preprocessing. Windows are evaluated in eval mode
    (running statistics only), so the trace is independent of batching.
    """
    cfg = model.config
    if record.n_channels != cfg.n_channels:
        raise ValueError(
            f"record has {record.n_channels} channels, model expects {cfg.n_channels}"
        )
    window = cfg.n_timepoints
    if record.n_samples < window:
        raise ValueError(
            f"record of {record.n_samples} samples is shorter than one "
            f"{window}-sample window"
        )
    if stride_samples < 1:
        raise ValueError("stride must be at least one sample")
    if not (0 <= positive_class < cfg.n_classes):
        raise ValueError(f"positive class {positive_class} out of range")

    windows = np.lib.stride_tricks.sliding_window_view(record.samples, window, axis=1)
    windows = windows[:, ::stride_samples, :]  # [c, n_positions, window]
    n_positions = windows.shape[1]
    trace = np.empty(n_positions)
    for start in range(0, n_positions, batch_size):
        stop = min(start + batch_size, n_positions)
        chunk = np.ascontiguousarray(np.moveaxis(windows[:, start:stop], 0, 1))
        probs = model.forward(chunk[..., None], mode="eval").probs
        trace[start:stop] = probs[:, positive_class]
    return trace


@dataclasses.dataclass
class DetectionResult:
    """Onset detections derived from a probability trace.

    detections holds fire times in seconds; latencies has one entry per
    annotated event (None = missed). Fires outside every annotation plus
    margin count as false detections.
    """

    detections: list[float]
    latencies: list[float | None]
    false_detections: int
    threshold: float
    min_hold_s: float

    @property
    def n_events(self) -> int:
        return len(self.latencies)

    @property
    def n_detected(self) -> int:
        return sum(1 for lat in self.latencies if lat is not None)

    def mean_latency(self) -> float | None:
        hits = [lat for lat in self.latencies if lat is not None]
        return float(np.mean(hits)) if hits else None

    def summary(self) -> dict:
        return {
            "n_events": self.n_events,
            "n_detected": self.n_detected,
            "false_detections": self.false_detections,
            "latencies_s": self.latencies,
            "mean_latency_s": self.mean_latency(),
            "detections_s": self.detections,
            "threshold": self.threshold,
            "min_hold_s": self.min_hold_s,
        }


def detect_onsets(
    trace: np.ndarray,
    threshold: float,
    min_hold_s: float,
    fs: float,
    stride_samples: int = 1,
    annotations: tuple[tuple[int, int, int], ...] = (),
    margin_s: float = 5.0,
    refractory_s: float | None = None,
) -> DetectionResult:
    """Fire where the trace has stayed at or above threshold for min_hold_s,
    with a refractory period (default: the hold itself) between fires.

    A fire is stamped when its hold interval completes, so a trace stepping
    to 1 exactly at an onset yields a latency of min_hold_s. Latencies clip
    at zero for fires landing early but within margin_s of the onset; fires
    farther than margin_s from every annotation are false detections.

    Raising the threshold can only shrink the set of hold-satisfied
    positions, and the refractory pass keeps a subset of any larger set's
    fires, so the detection count never increases with the threshold.
    """
    if not (0 < threshold < 1):
        raise ValueError("threshold must lie in (0, 1)")
    trace = np.asarray(trace, dtype=np.float64)
    dt = stride_samples / fs
    hold_steps = int(math.ceil(min_hold_s / dt)) if min_hold_s > 0 else 0
    refractory = min_hold_s if refractory_s is None else refractory_s
    refractory = max(refractory, dt)

    above = trace >= threshold
    if hold_steps == 0:
        satisfied = above
    elif hold_steps >= trace.shape[0]:
        satisfied = np.zeros_like(above)
    else:
        run = np.convolve(above.astype(np.int64), np.ones(hold_steps + 1, dtype=np.int64), "valid")
        satisfied = np.zeros_like(above)
        satisfied[hold_steps:] = run == hold_steps + 1

    fires: list[float] = []
    next_allowed = -np.inf
    for i in np.flatnonzero(satisfied):
        t = i * dt
        if t >= next_allowed:
            fires.append(t)
            next_allowed = t + refractory

    latencies: list[float | None] = []
    claimed = [False] * len(fires)
    for onset, offset, _label in annotations:
        onset_s = onset / fs
        offset_s = offset / fs
        hit: float | None = None
        for j, fire in enumerate(fires):
            if claimed[j]:
                continue
            if onset_s - margin_s <= fire <= offset_s + margin_s:
                claimed[j] = True
                hit = max(0.0, fire - onset_s)
                break
        latencies.append(hit)

    def in_any_window(fire: float) -> bool:
        return any(
            onset / fs - margin_s <= fire <= offset / fs + margin_s
            for onset, offset, _label in annotations
        )

    false_detections = sum(1 for fire in fires if not in_any_window(fire))
    return DetectionResult(
        detections=fires,
        latencies=latencies,
        false_detections=false_detections,
        threshold=threshold,
        min_hold_s=min_hold_s,
    )


def aggregate_folds(reports: list[dict]) -> dict:
    """Mean and population standard deviation per shared numeric metric."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = [
        k
        for k in reports[0]
        if all(isinstance(r.get(k), (int, float)) and r.get(k) is not None for r in reports)
    ]
    out: dict = {"n_folds": len(reports), "single_fold": len(reports) == 1}
    for key in keys:
        values = np.array([float(r[key]) for r in reports])
        out[key] = {"mean": float(values.mean()), "std": float(values.std())}
    return out
