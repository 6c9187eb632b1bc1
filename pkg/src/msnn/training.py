"""Loss, regularization, optimizer, schedule, and the training loop with
validation-based model selection.

The objective is the summed (not averaged) mini-batch cross-entropy plus an
L1-L2 penalty on convolution and classifier kernels; biases and batch-norm
affine parameters are exempt. The learning rate decays as
lr0 * (1 - decay_per_epoch)^epoch.
"""

from __future__ import annotations

import dataclasses
import json
import warnings

import numpy as np

from .data import EpochSet
from .model import MsnnModel
from .layers import Tape

LOG_FLOOR = 1e-12
_SHUFFLE_STREAM = 7919  # distinguishes the batch-shuffle RNG stream


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport | None" = None) -> None:
        super().__init__(message)
        self.report = report


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr0: float = 0.03
    decay_per_epoch: float = 0.001
    l1: float = 0.01
    l2: float = 0.001
    max_epochs: int = 200
    patience: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0 <= self.decay_per_epoch < 1):
            raise ValueError("decay_per_epoch must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not (0 < self.val_fraction < 1):
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in dataclasses.fields(self)}


@dataclasses.dataclass
class TrainReport:
    """Per-epoch history plus which epoch's parameters were kept.

    best_epoch carries the highest validation accuracy seen; ties go to the
    lower validation loss, then to the earlier epoch.
    """

    train_loss: list[float] = dataclasses.field(default_factory=list)
    val_loss: list[float] = dataclasses.field(default_factory=list)
    val_accuracy: list[float] = dataclasses.field(default_factory=list)
    learning_rate: list[float] = dataclasses.field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    n_epochs: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Summed cross-entropy over the mini-batch, log floored at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"label shape {y.shape} != prediction shape {y_hat.shape}")
    return float(-(y * np.log(np.maximum(y_hat, LOG_FLOOR))).sum())


def cross_entropy_grad(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """d(loss)/d(y_hat); zero where the log floor is active."""
    if y.shape != y_hat.shape:
        raise ValueError(f"label shape {y.shape} != prediction shape {y_hat.shape}")
    grad = np.zeros_like(y_hat)
    live = y_hat > LOG_FLOOR
    grad[live] = -y[live] / y_hat[live]
    return grad


def l1_l2_penalty(
    weights: dict[str, np.ndarray], l1: float, l2: float
) -> tuple[float, dict[str, np.ndarray]]:
    """penalty = l1*sum|w| + l2*sum w^2 over the given arrays, with its
    gradient; the |w| subgradient at zero is taken as zero."""
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        value += l1 * np.abs(w).sum() + l2 * (w * w).sum()
        grads[name] = l1 * np.sign(w) + 2.0 * l2 * w
    return float(value), grads


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * (1.0 - cfg.decay_per_epoch) ** epoch


class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    def __init__(self) -> None:
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place. NaN gradients abort
    the step before any parameter is touched."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def split_train_val(
    data: EpochSet, val_fraction: float = 0.1, seed: int = 0
) -> tuple[EpochSet, EpochSet]:
    """Stratified split; per-class proportions preserved within one sample.

    Classes too small to contribute a validation sample stay in training
    (with a warning).
    """
    if data.n_trials < 10:
        raise ValueError("need at least 10 samples to split off a validation set")
    rng = np.random.default_rng(seed)
    val_idx: list[np.ndarray] = []
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        n_val = int(round(idx.size * val_fraction))
        if idx.size < 2 or n_val == 0:
            warnings.warn(
                f"class {cls} has too few samples ({idx.size}) for the validation "
                "split; keeping them all in training"
            )
            continue
        rng.shuffle(idx)
        val_idx.append(idx[:n_val])
    if not val_idx:
        raise ValueError("no class is large enough to populate a validation set")
    val = np.sort(np.concatenate(val_idx))
    mask = np.ones(data.n_trials, dtype=bool)
    mask[val] = False
    train = np.flatnonzero(mask)
    return data.subset(train), data.subset(val)


def predict_probs(model: MsnnModel, epochs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities for [n, c, t] epochs."""
    outs = []
    for start in range(0, epochs.shape[0], batch_size):
        chunk = epochs[start : start + batch_size]
        outs.append(model.forward(chunk, mode="eval").probs)
    return np.concatenate(outs, axis=0)


def _validation_metrics(model, epochs, labels, n_classes, batch_size):
    probs = predict_probs(model, epochs, batch_size)
    loss = cross_entropy(one_hot(labels, n_classes), probs) / labels.shape[0]
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    return loss, accuracy


@dataclasses.dataclass
class FitResult:
    model: MsnnModel
    report: TrainReport


def fit(model: MsnnModel, data: EpochSet, cfg: TrainConfig) -> FitResult:
    """Train with shuffled mini-batches, exponential LR decay and early
    stopping on validation accuracy; returns the best-epoch parameters.

    data must already be preprocessed and normalized. The model is mutated
    in place and left at its best-epoch state.
    """
    if data.n_classes != model.config.n_classes:
        raise ValueError(
            f"data has {data.n_classes} classes, model expects {model.config.n_classes}"
        )
    train_set, val_set = split_train_val(data, cfg.val_fraction, cfg.seed)
    x_train = train_set.epochs[..., None]
    y_train = one_hot(train_set.labels, data.n_classes)
    n = x_train.shape[0]

    state = AdamState()
    report = TrainReport()
    regularized = cfg.l1 != 0.0 or cfg.l2 != 0.0
    best: dict[str, np.ndarray] | None = None
    best_key: tuple[float, float] | None = None  # (accuracy, -val_loss)
    epochs_since_best = 0

    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        perm = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            take = perm[start : start + cfg.batch_size]
            xb, yb = x_train[take], y_train[take]
            tape = Tape()
            result = model.forward(xb, mode="train", tape=tape)
            loss = cross_entropy(yb, result.probs)
            if not np.isfinite(loss):
                report.n_epochs = epoch
                raise TrainingDivergedError(
                    f"loss became non-finite in epoch {epoch}", report
                )
            grads, _ = model.backward(tape, cross_entropy_grad(yb, result.probs))
            if regularized:
                pen_value, pen_grads = l1_l2_penalty(model.weights(), cfg.l1, cfg.l2)
                for name, g in pen_grads.items():
                    grads[name] = grads[name] + g
                loss += pen_value
            adam_step(
                model.parameters(), grads, state, lr,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
            )
            batch_losses.append(loss)

        val_loss, val_acc = _validation_metrics(
            model, val_set.epochs[..., None], val_set.labels,
            data.n_classes, cfg.batch_size * 4,
        )
        report.train_loss.append(float(np.mean(batch_losses)))
        report.val_loss.append(val_loss)
        report.val_accuracy.append(val_acc)
        report.learning_rate.append(lr)
        report.n_epochs = epoch + 1

        key = (val_acc, -val_loss)
        if best_key is None or key > best_key:
            best_key = key
            best = model.snapshot()
            report.best_epoch = epoch
            report.best_val_accuracy = val_acc
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                report.stopped_early = True
                break

    assert best is not None
    model.restore(best)
    return FitResult(model=model, report=report)


def grad_check(
    model: MsnnModel,
    batch: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-5,
    n_coords: int = 200,
    mode: str = "eval",
    seed: int = 0,
    atol: float = 1e-7,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Coordinates are sampled from every parameter array, so each layer type is
    covered. Running statistics are frozen throughout, which keeps the loss a
    pure function of the parameters in both modes.

    Differences below ``atol`` count as exact agreement: central differences
    carry roundoff noise of roughly machine-eps * loss / h, which would
    otherwise dominate the ratio at coordinates whose true gradient is zero
    (for example a convolution bias feeding a train-mode batch norm).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    y = one_hot(np.asarray(labels), model.config.n_classes)

    def loss_only() -> float:
        result = model.forward(x, mode=mode, update_stats=False)
        return cross_entropy(y, result.probs)

    tape = Tape()
    result = model.forward(x, mode=mode, tape=tape, update_stats=False)
    analytic, _ = model.backward(tape, cross_entropy_grad(y, result.probs))

    params = model.parameters()
    rng = np.random.default_rng(seed)
    per_array = max(1, int(np.ceil(n_coords / len(params))))
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        count = min(per_array, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_only()
            flat[idx] = orig - h
            down = loss_only()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = analytic[name].reshape(-1)[idx]
            diff = abs(an - fd)
            err = 0.0 if diff <= atol else diff / max(abs(an), abs(fd))
            worst = max(worst, err)
    return worst
