"""Post-hoc analyses of a trained model: layer-wise relevance propagation,
forward-model activation patterns, and feature export for embedding tools.

Relevance propagation uses an epsilon-stabilized proportional rule with
per-layer conservation: each linear stage splits the incoming relevance
across its inputs in proportion to their signed contributions
a_i * w_ij / (z_j + eps * sign(z_j)), then rescales the layer so the total
is preserved exactly. Bias and stabilizer shares are thereby redistributed
proportionally instead of leaking, batch norm is folded into the adjacent
convolution (eval statistics), and leaky ReLU passes relevance through.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import EpochSet
from .model import MsnnModel
from .layers import leaky_relu
from .preproc import welch_params, welch_psd


@dataclasses.dataclass
class RelevanceMap:
    """Per-input relevance, shaped like the epoch; sums to the target
    pre-softmax score up to the recorded conservation gap."""

    relevance: np.ndarray  # [n_channels, n_timepoints]
    target_class: int
    epsilon: float
    target_logit: float

    @property
    def conservation_gap(self) -> float:
        """|sum(relevance) - target logit| relative to the logit."""
        denom = max(abs(self.target_logit), 1e-300)
        return abs(float(self.relevance.sum()) - self.target_logit) / denom


@dataclasses.dataclass
class ActivationPattern:
    """Forward-model channel pattern of one spatial filter."""

    raw: np.ndarray  # [n_channels]
    normalized: np.ndarray  # [n_channels], min 0 and max 1
    branch: int  # 1-based branch index
    filter_index: int


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _rescale(unnorm: np.ndarray, total: float) -> np.ndarray:
    """Enforce per-layer conservation, guarding degenerate cancellation."""
    s = unnorm.sum()
    if s == 0.0 or not np.isfinite(s) or abs(s) < 1e-12 * np.abs(unnorm).sum():
        return unnorm
    return unnorm * (total / s)


def _fold_bn(kernels: np.ndarray, bias: np.ndarray, bn, map_axis: int):
    """Fold an eval-mode batch norm into the preceding convolution."""
    scale, shift = bn.eval_scale_shift()
    shape = [1] * kernels.ndim
    shape[map_axis] = scale.shape[0]
    return kernels * scale.reshape(shape), bias * scale + shift


def lrp(
    model: MsnnModel, epoch: np.ndarray, target_class: int, epsilon: float = 1e-6
) -> RelevanceMap:
    """Relevance of every input sample for one class's pre-softmax score.

    Runs its own eval-mode forward pass (batch norm folded into the linear
    stages) and cross-checks it against the model's regular forward output.
    """
    cfg = model.config
    if not (0 <= target_class < cfg.n_classes):
        raise ValueError(f"target class {target_class} out of range [0, {cfg.n_classes})")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(epoch, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    if x.shape != (cfg.n_channels, cfg.n_timepoints):
        raise ValueError(
            f"epoch shape {x.shape} does not match ({cfg.n_channels}, {cfg.n_timepoints})"
        )
    slope = cfg.leaky_slope

    # Folded eval-mode forward, keeping every pre-activation.
    w_stem, b_stem = _fold_bn(model.stem.kernels, model.stem.bias, model.stem_bn, 0)
    klen = w_stem.shape[1]
    t_out = cfg.n_out_timepoints
    windows = np.lib.stride_tricks.sliding_window_view(x, klen, axis=1)
    z_stem = np.einsum("ctl,fl->ctf", windows, w_stem, optimize=True) + b_stem
    a = leaky_relu(z_stem, slope)

    chain_inputs: list[np.ndarray] = []  # input into each separable stage
    z_depth: list[np.ndarray] = []
    z_point: list[np.ndarray] = []
    taps: list[np.ndarray] = []
    z_spatial: list[np.ndarray] = []
    branch_outputs: list[np.ndarray] = []
    for k in range(cfg.n_branches):
        sep = model.separables[k]
        chain_inputs.append(a)
        left, _right = sep.pad
        t_len = a.shape[1]
        ksize = sep.depthwise.shape[1]
        apad = np.pad(a, ((0, 0), (left, ksize - 1 - left), (0, 0)))
        zd = np.zeros_like(a)
        for tap in range(ksize):
            zd += apad[:, tap : tap + t_len, :] * sep.depthwise[:, tap]
        z_depth.append(zd)
        w_point, b_point = _fold_bn(sep.pointwise, sep.bias, model.separable_bns[k], 1)
        zp = zd @ w_point + b_point
        z_point.append(zp)
        a = leaky_relu(zp, slope)
        taps.append(a)

        spat = model.spatials[k]
        w_spat, b_spat = _fold_bn(spat.kernels, spat.bias, model.spatial_bns[k], 0)
        zs = np.einsum("cti,jci->tj", a, w_spat, optimize=True) + b_spat
        z_spatial.append(zs)
        branch_outputs.append(leaky_relu(zs, slope))

    widths = list(cfg.feature_maps[1:])
    cat = np.concatenate(branch_outputs, axis=1)  # [t', sum F]
    pooled = cat.mean(axis=0)
    logits = pooled @ model.classifier.weights_ + model.classifier.bias

    reference = model.forward(x[None, ..., None], mode="eval")
    if not np.allclose(logits, reference.logits[0], rtol=1e-9, atol=1e-9):
        raise RuntimeError("folded forward pass diverged from the model forward")

    target_logit = float(logits[target_class])

    # classifier: only the target column carries relevance
    w_col = model.classifier.weights_[:, target_class]
    contrib = pooled * w_col
    r_pooled = _rescale(contrib / _stabilize(contrib.sum(), epsilon), target_logit)

    # pooling: each timepoint contributed x/t' to its map's mean
    contrib = cat / t_out
    r_cat = _rescale(
        contrib / _stabilize(pooled, epsilon) * r_pooled, float(r_pooled.sum())
    )

    # concatenation: relevance routes to the owning branch slice
    r_branches = np.split(r_cat, np.cumsum(widths)[:-1], axis=1)

    r_chain = np.zeros(0)
    for k in reversed(range(cfg.n_branches)):
        sep = model.separables[k]
        spat = model.spatials[k]
        w_spat, b_spat = _fold_bn(spat.kernels, spat.bias, model.spatial_bns[k], 0)
        r_sst = r_branches[k]  # leaky ReLU passes relevance through
        pre_bias = z_spatial[k] - b_spat
        share = r_sst / _stabilize(pre_bias, epsilon)
        r_tap = np.einsum("cti,jci,tj->cti", taps[k], w_spat, share, optimize=True)
        r_tap = _rescale(r_tap, float(r_sst.sum()))
        if k < cfg.n_branches - 1:
            r_tap = r_tap + r_chain

        # pointwise stage (batch norm folded)
        w_point, b_point = _fold_bn(sep.pointwise, sep.bias, model.separable_bns[k], 1)
        pre_bias = z_point[k] - b_point
        share = r_tap / _stabilize(pre_bias, epsilon)
        r_mid = z_depth[k] * (share @ w_point.T)
        r_mid = _rescale(r_mid, float(r_tap.sum()))

        # depthwise stage (no bias)
        a_in = chain_inputs[k]
        left, _right = sep.pad
        ksize = sep.depthwise.shape[1]
        t_len = a_in.shape[1]
        apad = np.pad(a_in, ((0, 0), (left, ksize - 1 - left), (0, 0)))
        share = r_mid / _stabilize(z_depth[k], epsilon)
        acc = np.zeros_like(apad)
        for tap in range(ksize):
            acc[:, tap : tap + t_len, :] += share * sep.depthwise[:, tap]
        r_in = apad * acc
        r_in = r_in[:, left : left + t_len, :]
        r_chain = _rescale(r_in, float(r_mid.sum()))

    # stem convolution back to the raw input (leaky ReLU pass-through first)
    share = r_chain / _stabilize(z_stem - b_stem, epsilon)
    acc = np.zeros_like(x)
    for tap in range(klen):
        acc[:, tap : tap + t_out] += share @ w_stem[:, tap]
    relevance = _rescale(x * acc, float(r_chain.sum()))

    return RelevanceMap(
        relevance=relevance,
        target_class=target_class,
        epsilon=epsilon,
        target_logit=target_logit,
    )


def relevance_spectrum(rmap: RelevanceMap, fs: float, window_s: float = 1.0):
    """Welch spectrum of the channel-summed relevance time course, on the
    same frequency grid as the signal spectra."""
    course = rmap.relevance.sum(axis=0)
    if not course.any():
        nperseg, _ = welch_params(fs, window_s)
        freqs = np.fft.rfftfreq(nperseg, d=1.0 / fs)
        return freqs, np.zeros_like(freqs)
    return welch_psd(course, fs, window_s)


def forward_model_patterns(
    cov_x: np.ndarray, filters: np.ndarray, reg: float = 1e-8
) -> np.ndarray:
    """Haufe-style forward model A = cov_x @ W @ inv(cov_s) for channel-space
    filters W [n_channels, n_filters]; cov_s is the filter-output covariance,
    diagonally regularized by reg * trace / n."""
    cov_s = filters.T @ cov_x @ filters
    n = cov_s.shape[0]
    cov_s = cov_s + (reg * np.trace(cov_s) / n) * np.eye(n)
    try:
        inv = np.linalg.inv(cov_s)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"filter-output covariance is singular: {exc}") from exc
    return cov_x @ filters @ inv


def _minmax_normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def activation_patterns(
    model: MsnnModel, data: EpochSet, branch: int, batch_size: int = 64
) -> list[ActivationPattern]:
    """Forward-model transform of one branch's spatial filter bank.

    Observations are the branch input's channel vectors pooled over trials,
    timepoints and feature maps; each spatial filter's channel profile is its
    kernel summed over the input-map axis. Patterns are reported raw and
    min-max normalized to [0, 1].
    """
    cfg = model.config
    if not (1 <= branch <= cfg.n_branches):
        raise ValueError(f"branch must lie in [1, {cfg.n_branches}], got {branch}")
    if data.n_channels != cfg.n_channels:
        raise ValueError("data channel count does not match the model")

    obs_sum = np.zeros(cfg.n_channels)
    obs_sq = np.zeros((cfg.n_channels, cfg.n_channels))
    n_obs = 0
    for start in range(0, data.n_trials, batch_size):
        chunk = data.epochs[start : start + batch_size][..., None]
        tap = model.forward(chunk, mode="eval").intermediates["st"][branch - 1]
        flat = np.moveaxis(tap, 1, 0).reshape(cfg.n_channels, -1)
        obs_sum += flat.sum(axis=1)
        obs_sq += flat @ flat.T
        n_obs += flat.shape[1]
    mean = obs_sum / n_obs
    cov_x = obs_sq / n_obs - np.outer(mean, mean)

    filters = model.spatials[branch - 1].kernels.sum(axis=2).T  # [n_c, F]
    patterns = forward_model_patterns(cov_x, filters)
    return [
        ActivationPattern(
            raw=patterns[:, j].copy(),
            normalized=_minmax_normalize(patterns[:, j]),
            branch=branch,
            filter_index=j,
        )
        for j in range(patterns.shape[1])
    ]


FEATURE_STAGES_DOC = "'branch1'..'branchN' (time-averaged spatial output) or 'pooled'"


def export_features(
    model: MsnnModel, data: EpochSet, stage: str, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial feature matrix for external embedding/visualization tools.

    Branch stages are time-averaged to [n_trials, F_k]; 'pooled' is the
    classifier input [n_trials, sum F], which reproduces the model's
    probabilities exactly when pushed through the stored classifier.
    """
    cfg = model.config
    stages = {f"branch{k + 1}": k for k in range(cfg.n_branches)}
    if stage != "pooled" and stage not in stages:
        options = ", ".join(list(stages) + ["pooled"])
        raise ValueError(f"unknown stage {stage!r}; options: {options}")
    chunks = []
    for start in range(0, data.n_trials, batch_size):
        chunk = data.epochs[start : start + batch_size][..., None]
        inter = model.forward(chunk, mode="eval").intermediates
        if stage == "pooled":
            feats = inter["gap"].reshape(chunk.shape[0], cfg.concat_dim)
        else:
            feats = inter["sst"][stages[stage]].mean(axis=2)[:, 0, :]
        chunks.append(feats)
    return np.concatenate(chunks, axis=0), data.labels.copy()
