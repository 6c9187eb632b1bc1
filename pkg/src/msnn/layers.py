"""Network layers with hand-written forward and reverse-mode backward passes.

Activations are float64 arrays shaped [batch, channel, time, feature_map].
Each layer caches whatever its backward pass needs on a Tape during the
forward pass; a Tape records one forward pass and may be consumed by exactly
one backward pass, replayed in reverse order by the owning model.

Convolutions follow the usual machine-learning convention (no kernel flip),
so a unit impulse kernel reproduces its input.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import fft as _sfft

_WINDOW = np.lib.stride_tricks.sliding_window_view


def _fft_corr_time(x: np.ndarray, kernels: np.ndarray, pad_left: int, out_len: int) -> np.ndarray:
    """Cross-correlation along axis 2 with per-map kernels, via the FFT.

    x is [B, c, t, F] (or F=1, broadcast against every kernel); kernels is
    [F, T]. With x zero-extended by pad_left on the left, returns
    out[..., i, f] = sum_u kernels[f, u] * x[..., i + u - pad_left, f]
    for i in [0, out_len). pad_left=(T-1)//2, out_len=t gives same padding;
    pad_left=0, out_len=t-T+1 gives a valid correlation.
    """
    t, n_taps = x.shape[2], kernels.shape[1]
    n = _sfft.next_fast_len(t + n_taps - 1)
    spec_x = _sfft.rfft(x, n=n, axis=2, workers=-1)
    spec_k = _sfft.rfft(np.ascontiguousarray(kernels[:, ::-1].T), n=n, axis=0)
    z = _sfft.irfft(spec_x * spec_k[None, None], n=n, axis=2, workers=-1)
    start = n_taps - 1 - pad_left
    return z[:, :, start : start + out_len, :]


def _fft_conv_time(
    g: np.ndarray, kernels: np.ndarray, start: int, out_len: int, sum_maps: bool = False
) -> np.ndarray:
    """Linear convolution along axis 2 with per-map kernels, sliced to
    [start, start+out_len). With sum_maps the products are reduced over the
    map axis before the inverse transform (the stem's input gradient)."""
    n = _sfft.next_fast_len(g.shape[2] + kernels.shape[1] - 1)
    spec_g = _sfft.rfft(g, n=n, axis=2, workers=-1)
    spec_k = _sfft.rfft(np.ascontiguousarray(kernels.T), n=n, axis=0)
    prod = spec_g * spec_k[None, None]
    if sum_maps:
        prod = prod.sum(axis=3, keepdims=True)
    z = _sfft.irfft(prod, n=n, axis=2)
    return z[:, :, start : start + out_len, :]


def _fft_corr_lags(x: np.ndarray, g: np.ndarray, lag_offset: int, n_lags: int) -> np.ndarray:
    """Kernel gradients: out[f, u] = sum_{b,c,i} g[..., i, f] * x[..., i + u + lag_offset, f]
    with x zero outside its support (x may carry a single broadcast map).

    The transform length n >= t_x + n_lags keeps circular indices off the
    data for every requested lag, so the result equals the direct sum.
    """
    n = _sfft.next_fast_len(x.shape[2] + n_lags + abs(lag_offset))
    spec_x = _sfft.rfft(x, n=n, axis=2, workers=-1)
    spec_g = _sfft.rfft(g, n=n, axis=2, workers=-1)
    prod = (np.conj(spec_g) * spec_x).sum(axis=(0, 1))
    lags = _sfft.irfft(prod, n=n, axis=0)  # [n, F]
    idx = (np.arange(n_lags) + lag_offset) % n
    return np.ascontiguousarray(lags[idx].T)  # [F, n_lags]


class Tape:
    """Ordered record of layer applications from a single forward pass."""

    def __init__(self) -> None:
        self._caches: dict[str, object] = {}
        self._order: list[str] = []
        self.consumed = False

    def put(self, name: str, cache) -> None:
        if name in self._caches:
            raise RuntimeError(f"layer {name!r} recorded twice on one tape")
        self._caches[name] = cache
        self._order.append(name)

    def get(self, name: str):
        try:
            return self._caches[name]
        except KeyError:
            raise RuntimeError(f"no forward recorded for layer {name!r}") from None

    def consume(self) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self.consumed = True


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _require_4d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"{name} expects [batch, channel, time, map] input, got {x.shape}")
    return x


class Layer:
    """Base: named parameters plus forward/backward over the shared layout."""

    def __init__(self, name: str) -> None:
        self.name = name

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def weights(self) -> dict[str, np.ndarray]:
        """The subset of params that regularization applies to."""
        return {}

    def init(self, rng: np.random.Generator) -> None:
        pass


class TemporalConv(Layer):
    """Valid 1-D convolution along time, the same kernels applied to every
    channel independently. Input must carry a single feature map."""

    def __init__(self, name: str, n_maps: int, kernel_len: int) -> None:
        super().__init__(name)
        self.kernels = np.zeros((n_maps, kernel_len))
        self.bias = np.zeros(n_maps)

    def init(self, rng: np.random.Generator) -> None:
        n_maps, klen = self.kernels.shape
        self.kernels = xavier_uniform(rng, (n_maps, klen), klen, klen * n_maps)
        self.bias = np.zeros(n_maps)

    def params(self):
        return {f"{self.name}.kernels": self.kernels, f"{self.name}.bias": self.bias}

    def weights(self):
        return {f"{self.name}.kernels": self.kernels}

    def _fft_len(self, t_len: int) -> int:
        return _sfft.next_fast_len(t_len + self.kernels.shape[1])

    def forward(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        x = _require_4d(x, self.name)
        klen = self.kernels.shape[1]
        if x.shape[3] != 1:
            raise ValueError(f"{self.name}: expected a single input map, got {x.shape[3]}")
        if x.shape[2] < klen:
            raise ValueError(
                f"{self.name}: kernel of {klen} taps longer than {x.shape[2]} timepoints"
            )
        t_len = x.shape[2]
        t_out = t_len - klen + 1
        n = self._fft_len(t_len)
        spec_x = _sfft.rfft(x, n=n, axis=2, workers=-1)
        spec_k = _sfft.rfft(np.ascontiguousarray(self.kernels[:, ::-1].T), n=n, axis=0)
        y = _sfft.irfft(spec_x * spec_k[None, None], n=n, axis=2, workers=-1)[
            :, :, klen - 1 : klen - 1 + t_out, :
        ]
        y = y + self.bias
        if tape is not None:
            tape.put(self.name, (spec_x, t_len))
        return y

    def backward(self, cache, gy: np.ndarray):
        spec_x, t_len = cache
        klen = self.kernels.shape[1]
        n = self._fft_len(t_len)
        spec_g = _sfft.rfft(gy, n=n, axis=2, workers=-1)
        # kernel gradient: correlate the (single-map) input against gy
        prod = np.einsum("bcnf,bcn->nf", np.conj(spec_g), spec_x[..., 0], optimize=True)
        lags = _sfft.irfft(prod, n=n, axis=0)
        g_kernels = np.ascontiguousarray(lags[:klen].T)
        g_bias = gy.sum(axis=(0, 1, 2))
        spec_k = _sfft.rfft(np.ascontiguousarray(self.kernels.T), n=n, axis=0)
        gx = _sfft.irfft(
            (spec_g * spec_k[None, None]).sum(axis=3, keepdims=True), n=n, axis=2, workers=-1
        )[:, :, :t_len, :]
        return gx, {
            f"{self.name}.kernels": g_kernels,
            f"{self.name}.bias": g_bias,
        }


class SeparableConv(Layer):
    """Depthwise temporal filtering (one kernel per input map, multiplier 1,
    symmetric zero padding that preserves the time length) followed by a
    pointwise 1x1 remix across maps. The single bias sits on the pointwise
    stage.

    Even kernel lengths pad one extra zero on the right. The input spectrum
    from the forward pass is cached and reused for the kernel gradient.
    """

    def __init__(self, name: str, in_maps: int, out_maps: int, kernel_len: int) -> None:
        super().__init__(name)
        self.depthwise = np.zeros((in_maps, kernel_len))
        self.pointwise = np.zeros((in_maps, out_maps))
        self.bias = np.zeros(out_maps)

    @property
    def pad(self) -> tuple[int, int]:
        klen = self.depthwise.shape[1]
        left = (klen - 1) // 2
        return left, klen - 1 - left

    def init(self, rng: np.random.Generator) -> None:
        in_maps, klen = self.depthwise.shape
        out_maps = self.pointwise.shape[1]
        self.depthwise = xavier_uniform(rng, (in_maps, klen), klen, klen)
        self.pointwise = xavier_uniform(rng, (in_maps, out_maps), in_maps, out_maps)
        self.bias = np.zeros(out_maps)

    def params(self):
        return {
            f"{self.name}.depthwise": self.depthwise,
            f"{self.name}.pointwise": self.pointwise,
            f"{self.name}.bias": self.bias,
        }

    def weights(self):
        return {
            f"{self.name}.depthwise": self.depthwise,
            f"{self.name}.pointwise": self.pointwise,
        }

    def _fft_len(self, t_len: int) -> int:
        # long enough for the same-padded correlation, the full convolution
        # of the input gradient, and wrap-free kernel-gradient lags
        return _sfft.next_fast_len(t_len + self.depthwise.shape[1])

    def depthwise_only(self, x: np.ndarray) -> np.ndarray:
        """The padded per-map temporal stage on its own (used by analysis)."""
        x = _require_4d(x, self.name)
        if x.shape[3] != self.depthwise.shape[0]:
            raise ValueError(
                f"{self.name}: {x.shape[3]} input maps, expected {self.depthwise.shape[0]}"
            )
        left, _right = self.pad
        return _fft_corr_time(x, self.depthwise, left, x.shape[2])

    def forward(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        x = _require_4d(x, self.name)
        if x.shape[3] != self.depthwise.shape[0]:
            raise ValueError(
                f"{self.name}: {x.shape[3]} input maps, expected {self.depthwise.shape[0]}"
            )
        t_len = x.shape[2]
        klen = self.depthwise.shape[1]
        left, _right = self.pad
        n = self._fft_len(t_len)
        spec_x = _sfft.rfft(x, n=n, axis=2, workers=-1)
        spec_k = _sfft.rfft(np.ascontiguousarray(self.depthwise[:, ::-1].T), n=n, axis=0)
        start = klen - 1 - left
        mid = _sfft.irfft(spec_x * spec_k[None, None], n=n, axis=2, workers=-1)[
            :, :, start : start + t_len, :
        ]
        y = mid @ self.pointwise + self.bias
        if tape is not None:
            tape.put(self.name, (spec_x, mid, t_len))
        return y

    def backward(self, cache, gy: np.ndarray):
        spec_x, mid, t_len = cache
        in_maps, klen = self.depthwise.shape
        out_maps = self.pointwise.shape[1]
        left, _right = self.pad
        n = self._fft_len(t_len)

        flat_mid = mid.reshape(-1, in_maps)
        flat_gy = np.ascontiguousarray(gy).reshape(-1, out_maps)
        g_point = flat_mid.T @ flat_gy
        g_bias = flat_gy.sum(axis=0)
        g_mid = gy @ self.pointwise.T

        spec_g = _sfft.rfft(g_mid, n=n, axis=2, workers=-1)
        prod = np.einsum("bcnf,bcnf->nf", np.conj(spec_g), spec_x, optimize=True)
        lags = _sfft.irfft(prod, n=n, axis=0)
        idx = (np.arange(klen) - left) % n
        g_depth = np.ascontiguousarray(lags[idx].T)

        spec_k = _sfft.rfft(np.ascontiguousarray(self.depthwise.T), n=n, axis=0)
        gx = _sfft.irfft(spec_g * spec_k[None, None], n=n, axis=2, workers=-1)[
            :, :, left : left + t_len, :
        ]
        return gx, {
            f"{self.name}.depthwise": g_depth,
            f"{self.name}.pointwise": g_point,
            f"{self.name}.bias": g_bias,
        }


class SpatialConv(Layer):
    """Valid convolution whose kernel spans every channel at one timepoint,
    collapsing the channel axis: each output map is a learned linear
    combination over (channel x input map)."""

    def __init__(self, name: str, n_channels: int, in_maps: int, out_maps: int) -> None:
        super().__init__(name)
        self.kernels = np.zeros((out_maps, n_channels, in_maps))
        self.bias = np.zeros(out_maps)

    def init(self, rng: np.random.Generator) -> None:
        out_maps, n_c, in_maps = self.kernels.shape
        self.kernels = xavier_uniform(
            rng, (out_maps, n_c, in_maps), n_c * in_maps, n_c * out_maps
        )
        self.bias = np.zeros(out_maps)

    def params(self):
        return {f"{self.name}.kernels": self.kernels, f"{self.name}.bias": self.bias}

    def weights(self):
        return {f"{self.name}.kernels": self.kernels}

    def forward(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        x = _require_4d(x, self.name)
        out_maps, n_c, in_maps = self.kernels.shape
        if x.shape[1] != n_c or x.shape[3] != in_maps:
            raise ValueError(
                f"{self.name}: input {x.shape} does not match kernel "
                f"[{out_maps}, {n_c}, {in_maps}]"
            )
        b, _, t_len, _ = x.shape
        flat = np.moveaxis(x, 1, 2).reshape(b * t_len, n_c * in_maps)
        y = (flat @ self.kernels.reshape(out_maps, -1).T).reshape(b, t_len, out_maps)
        y = y + self.bias
        if tape is not None:
            tape.put(self.name, x)
        return y[:, None, :, :]

    def backward(self, cache, gy: np.ndarray):
        x = cache
        out_maps, n_c, in_maps = self.kernels.shape
        b, _, t_len, _ = x.shape
        g2 = gy[:, 0].reshape(b * t_len, out_maps)
        flat = np.moveaxis(x, 1, 2).reshape(b * t_len, n_c * in_maps)
        g_kernels = (g2.T @ flat).reshape(out_maps, n_c, in_maps)
        g_bias = g2.sum(axis=0)
        gx_flat = g2 @ self.kernels.reshape(out_maps, -1)
        gx = np.moveaxis(gx_flat.reshape(b, t_len, n_c, in_maps), 2, 1)
        return gx, {f"{self.name}.kernels": g_kernels, f"{self.name}.bias": g_bias}


class BatchNorm(Layer):
    """Per-feature-map normalization over (batch, channel, time).

    Training mode normalizes with biased batch moments and maintains running
    statistics via an exponential moving average; eval mode is a fixed
    per-map affine map and refuses to run before any statistics exist.
    """

    def __init__(self, name: str, n_maps: int, eps: float = 1e-5, momentum: float = 0.9) -> None:
        super().__init__(name)
        self.gamma = np.ones(n_maps)
        self.beta = np.zeros(n_maps)
        self.running_mean = np.zeros(n_maps)
        self.running_var = np.ones(n_maps)
        self.num_updates = 0
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def state(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def eval_scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """The frozen affine map y = scale * x + shift used in eval mode."""
        if self.num_updates == 0:
            raise RuntimeError(
                f"{self.name}: eval-mode use before any training update"
            )
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - scale * self.running_mean

    def forward(
        self,
        x: np.ndarray,
        tape: Tape | None = None,
        train: bool = False,
        update_stats: bool | None = None,
    ) -> np.ndarray:
        x = _require_4d(x, self.name)
        if train:
            n = x.shape[0] * x.shape[1] * x.shape[2]
            flat = x.reshape(n, x.shape[3])
            mean = flat.mean(axis=0)
            # single-pass second moment; activations here are O(1) scaled
            sq = np.einsum("nf,nf->f", flat, flat)
            var = np.maximum(sq / n - mean * mean, 0.0)
            if update_stats is None or update_stats:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mean
                self.running_var = m * self.running_var + (1 - m) * var
                self.num_updates += 1
            inv_std = 1.0 / np.sqrt(var + self.eps)
        else:
            if self.num_updates == 0:
                raise RuntimeError(
                    f"{self.name}: eval-mode use before any training update"
                )
            mean = self.running_mean
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        if tape is not None:
            tape.put(self.name, ("train" if train else "eval", x, mean, inv_std))
        scale = self.gamma * inv_std
        return x * scale + (self.beta - mean * scale)

    def backward(self, cache, gy: np.ndarray):
        mode, x, mean, inv_std = cache
        n_rows = gy.shape[0] * gy.shape[1] * gy.shape[2]
        gy_flat = gy.reshape(n_rows, gy.shape[3])
        x_flat = x.reshape(n_rows, x.shape[3])
        s_gy = gy_flat.sum(axis=0)
        s_gy_x = np.einsum("nf,nf->f", gy_flat, x_flat)
        g_beta = s_gy
        g_gamma = inv_std * (s_gy_x - mean * s_gy)
        a = self.gamma * inv_std
        if mode == "eval":
            gx = gy * a
        else:
            # gx = inv_std*(g_xhat - mean(g_xhat) - xhat*mean(g_xhat*xhat)),
            # expanded to one fused pass gx = a*gy + coef_x*x + const
            n = x.shape[0] * x.shape[1] * x.shape[2]
            m_ghat = a * s_gy / n  # inv_std * mean(g_xhat)
            m_ghat_xhat = a * inv_std * (s_gy_x - mean * s_gy) / n
            coef_x = -inv_std * m_ghat_xhat
            const = -m_ghat + mean * inv_std * m_ghat_xhat
            gx = gy * a + x * coef_x + const
        return gx, {f"{self.name}.gamma": g_gamma, f"{self.name}.beta": g_beta}


class LeakyRelu(Layer):
    def __init__(self, name: str, slope: float) -> None:
        super().__init__(name)
        if not (0 < slope < 1):
            raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
        self.slope = slope

    def forward(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        neg = x < 0
        if tape is not None:
            tape.put(self.name, neg)
        out = x.copy()
        np.multiply(out, self.slope, out=out, where=neg)
        return out

    def backward(self, cache, gy: np.ndarray):
        neg = cache
        gx = gy.copy()
        np.multiply(gx, self.slope, out=gx, where=neg)
        return gx, {}


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x < 0, slope * x, x)


def global_average_pool(x: np.ndarray) -> np.ndarray:
    """Per-map mean over time: [B, 1, t, F] -> [B, 1, 1, F]."""
    x = _require_4d(x, "global_average_pool")
    if x.shape[2] == 0:
        raise ValueError("cannot pool over an empty time axis")
    return x.mean(axis=2, keepdims=True)


def global_average_pool_backward(gy: np.ndarray, t_len: int) -> np.ndarray:
    """Distribute 1/t of the pooled gradient to every timepoint."""
    return np.repeat(gy / t_len, t_len, axis=2)


def concat_feature_maps(xs: list[np.ndarray]) -> np.ndarray:
    """Stack branch outputs along the feature-map axis, in branch order."""
    if not xs:
        raise ValueError("nothing to concatenate")
    first = xs[0]
    for x in xs[1:]:
        if x.shape[:3] != first.shape[:3]:
            raise ValueError(
                f"cannot concatenate {x.shape} with {first.shape}: "
                "batch/channel/time dims differ"
            )
    return np.concatenate(xs, axis=3)


def split_feature_maps(x: np.ndarray, widths: list[int]) -> list[np.ndarray]:
    if sum(widths) != x.shape[3]:
        raise ValueError("split widths do not cover the feature-map axis")
    return list(np.split(x, np.cumsum(widths)[:-1], axis=3))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class DenseSoftmax(Layer):
    """Single linear map from pooled features to class probabilities."""

    def __init__(self, name: str, in_dim: int, n_classes: int) -> None:
        super().__init__(name)
        self.weights_ = np.zeros((in_dim, n_classes))
        self.bias = np.zeros(n_classes)

    def init(self, rng: np.random.Generator) -> None:
        in_dim, n_out = self.weights_.shape
        self.weights_ = xavier_uniform(rng, (in_dim, n_out), in_dim, n_out)
        self.bias = np.zeros(n_out)

    def params(self):
        return {f"{self.name}.weights": self.weights_, f"{self.name}.bias": self.bias}

    def weights(self):
        return {f"{self.name}.weights": self.weights_}

    def logits(self, features: np.ndarray) -> np.ndarray:
        if features.shape[-1] != self.weights_.shape[0]:
            raise ValueError(
                f"{self.name}: feature dim {features.shape[-1]} does not match "
                f"{self.weights_.shape[0]}"
            )
        return features @ self.weights_ + self.bias

    def forward(self, features: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        probs = softmax(self.logits(features))
        if tape is not None:
            tape.put(self.name, (features, probs))
        return probs

    def backward(self, cache, g_probs: np.ndarray):
        features, probs = cache
        inner = (g_probs * probs).sum(axis=-1, keepdims=True)
        g_logits = probs * (g_probs - inner)
        g_w = features.T @ g_logits
        g_b = g_logits.sum(axis=0)
        g_features = g_logits @ self.weights_.T
        return g_features, {f"{self.name}.weights": g_w, f"{self.name}.bias": g_b}
