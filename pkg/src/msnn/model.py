"""The multi-scale network: a shared temporal stack whose intermediate
activations feed per-branch spatial convolutions.

Architecture, for N branches:

    input [B, n_c, n_T, 1]
      -> stem: channel-wise temporal conv (kernel fs/2, valid) + BN + lReLU
      -> branch chain: separable conv k (+ BN + lReLU) for k = 1..N,
         applied sequentially; branch k taps the chain after stage k
      -> per tap: spatial conv over all channels (+ BN + lReLU),
         collapsing the channel axis
      -> concat taps along the feature-map axis -> global average pool
      -> dense + softmax

Branches therefore share their lower stages: branch k reuses the separable
convolutions of branches 1..k-1 rather than owning a parallel stack.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .binio import (
    ByteReader,
    ByteWriter,
    FormatError,
    check_magic_and_version,
    verify_trailing_crc,
)
from .layers import (
    BatchNorm,
    DenseSoftmax,
    LeakyRelu,
    SeparableConv,
    SpatialConv,
    Tape,
    TemporalConv,
    concat_feature_maps,
    global_average_pool,
    global_average_pool_backward,
    split_feature_maps,
)

CHECKPOINT_MAGIC = b"MSNN"
CHECKPOINT_VERSION = 1

DEFAULT_KERNEL_SIZES = (100, 60, 20)
SSVEP_KERNEL_SIZES = (20, 10, 5)
DEFAULT_FEATURE_MAPS = (4, 16, 32, 64)


@dataclasses.dataclass(frozen=True)
class MsnnConfig:
    """Architecture and numeric hyperparameters.

    feature_maps lists the stem width followed by each branch width, so it
    is one element longer than kernel_sizes.
    """

    n_channels: int
    n_timepoints: int
    sampling_rate: int
    n_classes: int
    kernel_sizes: tuple[int, ...] = DEFAULT_KERNEL_SIZES
    feature_maps: tuple[int, ...] = DEFAULT_FEATURE_MAPS
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    effective_fs: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(t) for t in self.kernel_sizes))
        object.__setattr__(self, "feature_maps", tuple(int(f) for f in self.feature_maps))
        problems = []
        if self.n_channels < 1:
            problems.append("n_channels must be >= 1")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.sampling_rate < 2 or self.sampling_rate % 2 != 0:
            problems.append(f"sampling_rate must be even and >= 2, got {self.sampling_rate}")
        if len(self.feature_maps) != len(self.kernel_sizes) + 1:
            problems.append(
                "feature_maps must list the stem width plus one width per branch"
            )
        if any(f < 1 for f in self.feature_maps) or any(t < 1 for t in self.kernel_sizes):
            problems.append("feature widths and kernel sizes must be positive")
        if not problems:
            if self.n_timepoints < self.stem_kernel_len:
                problems.append(
                    f"n_timepoints {self.n_timepoints} shorter than the stem kernel "
                    f"{self.stem_kernel_len}"
                )
            else:
                too_big = [t for t in self.kernel_sizes if t > self.n_out_timepoints]
                if too_big:
                    problems.append(
                        f"kernel sizes {too_big} exceed the post-stem length "
                        f"{self.n_out_timepoints}"
                    )
        if problems:
            raise ValueError("invalid configuration: " + "; ".join(problems))

    @property
    def stem_kernel_len(self) -> int:
        return self.sampling_rate // 2

    @property
    def n_out_timepoints(self) -> int:
        """Time length after the valid stem convolution."""
        return self.n_timepoints - self.stem_kernel_len + 1

    @property
    def n_branches(self) -> int:
        return len(self.kernel_sizes)

    @property
    def concat_dim(self) -> int:
        return sum(self.feature_maps[1:])

    @property
    def resolved_effective_fs(self) -> float:
        # Valid convolution does not resample, so the default is the input rate.
        return self.sampling_rate if self.effective_fs is None else self.effective_fs

    def branch_frequencies_hz(self) -> tuple[float, ...]:
        """Nominal center frequency each branch kernel length corresponds to."""
        return tuple(self.resolved_effective_fs / t for t in self.kernel_sizes)

    def to_dict(self) -> dict[str, str]:
        return {
            "n_channels": str(self.n_channels),
            "n_timepoints": str(self.n_timepoints),
            "sampling_rate": str(self.sampling_rate),
            "n_classes": str(self.n_classes),
            "kernel_sizes": ",".join(str(t) for t in self.kernel_sizes),
            "feature_maps": ",".join(str(f) for f in self.feature_maps),
            "leaky_slope": repr(self.leaky_slope),
            "bn_eps": repr(self.bn_eps),
            "bn_momentum": repr(self.bn_momentum),
            "effective_fs": "" if self.effective_fs is None else repr(self.effective_fs),
            "seed": str(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "MsnnConfig":
        return cls(
            n_channels=int(d["n_channels"]),
            n_timepoints=int(d["n_timepoints"]),
            sampling_rate=int(d["sampling_rate"]),
            n_classes=int(d["n_classes"]),
            kernel_sizes=tuple(int(t) for t in d["kernel_sizes"].split(",")),
            feature_maps=tuple(int(f) for f in d["feature_maps"].split(",")),
            leaky_slope=float(d["leaky_slope"]),
            bn_eps=float(d["bn_eps"]),
            bn_momentum=float(d["bn_momentum"]),
            effective_fs=float(d["effective_fs"]) if d.get("effective_fs") else None,
            seed=int(d["seed"]),
        )


@dataclasses.dataclass
class ForwardResult:
    probs: np.ndarray  # [B, n_classes]
    logits: np.ndarray  # [B, n_classes]
    intermediates: dict


@dataclasses.dataclass(frozen=True)
class ParamCount:
    per_layer: dict[str, int]
    total: int
    classifier_weights: int
    classifier_weights_without_pooling: int
    pooling_reduction_factor: int
    separable_weights_per_map: tuple[int, ...]
    separable_weights_shared_kernel: tuple[int, ...]


class MsnnModel:
    """Parameter store plus forward/backward for the multi-scale network."""

    def __init__(self, config: MsnnConfig) -> None:
        self.config = config
        f = config.feature_maps
        self.stem = TemporalConv("stem", f[0], config.stem_kernel_len)
        self.stem_bn = BatchNorm("stem_bn", f[0], config.bn_eps, config.bn_momentum)
        self.stem_act = LeakyRelu("stem_act", config.leaky_slope)
        self.separables: list[SeparableConv] = []
        self.separable_bns: list[BatchNorm] = []
        self.separable_acts: list[LeakyRelu] = []
        self.spatials: list[SpatialConv] = []
        self.spatial_bns: list[BatchNorm] = []
        self.spatial_acts: list[LeakyRelu] = []
        for k, t_k in enumerate(config.kernel_sizes, start=1):
            self.separables.append(SeparableConv(f"sep{k}", f[k - 1], f[k], t_k))
            self.separable_bns.append(
                BatchNorm(f"sep{k}_bn", f[k], config.bn_eps, config.bn_momentum)
            )
            self.separable_acts.append(LeakyRelu(f"sep{k}_act", config.leaky_slope))
            self.spatials.append(
                SpatialConv(f"spatial{k}", config.n_channels, f[k], f[k])
            )
            self.spatial_bns.append(
                BatchNorm(f"spatial{k}_bn", f[k], config.bn_eps, config.bn_momentum)
            )
            self.spatial_acts.append(LeakyRelu(f"spatial{k}_act", config.leaky_slope))
        self.classifier = DenseSoftmax("classifier", config.concat_dim, config.n_classes)

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: MsnnConfig) -> "MsnnModel":
        """Deterministic construction: all weights drawn Xavier-uniform from
        config.seed in a fixed order, biases zero, BN affine at identity."""
        model = cls(config)
        rng = np.random.default_rng(config.seed)
        model.stem.init(rng)
        for sep, spat in zip(model.separables, model.spatials):
            sep.init(rng)
            spat.init(rng)
        model.classifier.init(rng)
        return model

    def _layers(self):
        yield self.stem
        yield self.stem_bn
        for sep, sbn, spat, pbn in zip(
            self.separables, self.separable_bns, self.spatials, self.spatial_bns
        ):
            yield sep
            yield sbn
            yield spat
            yield pbn
        yield self.classifier

    def parameters(self) -> dict[str, np.ndarray]:
        """Every trainable array, each reachable from exactly one named slot."""
        out: dict[str, np.ndarray] = {}
        for layer in self._layers():
            out.update(layer.params())
        return out

    def weights(self) -> dict[str, np.ndarray]:
        """The regularized subset: convolution/classifier kernels only."""
        out: dict[str, np.ndarray] = {}
        for layer in self._layers():
            out.update(layer.weights())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self._layers():
            if isinstance(layer, BatchNorm):
                out.update(layer.state())
                out[f"{layer.name}.num_updates"] = np.array([float(layer.num_updates)])
        return out

    def batch_norms(self) -> list[BatchNorm]:
        return [l for l in self._layers() if isinstance(l, BatchNorm)]

    def snapshot(self) -> dict[str, np.ndarray]:
        arrays = {**self.parameters(), **self.state_arrays()}
        return {name: arr.copy() for name, arr in arrays.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, arr in params.items():
            np.copyto(arr, snap[name])
        for bn in self.batch_norms():
            bn.running_mean = snap[f"{bn.name}.running_mean"].copy()
            bn.running_var = snap[f"{bn.name}.running_var"].copy()
            bn.num_updates = int(snap[f"{bn.name}.num_updates"][0])

    # -- forward / backward -------------------------------------------------

    def _check_input(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[..., None]
        if batch.ndim != 4 or batch.shape[3] != 1:
            raise ValueError(
                f"expected [batch, {self.config.n_channels}, "
                f"{self.config.n_timepoints}, 1], got {batch.shape}"
            )
        if batch.shape[1] != self.config.n_channels or batch.shape[2] != self.config.n_timepoints:
            raise ValueError(
                f"input {batch.shape[1:3]} does not match configured "
                f"({self.config.n_channels}, {self.config.n_timepoints})"
            )
        return batch

    def _expect(self, name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
        if arr.shape[1:] != shape:
            raise RuntimeError(
                f"shape contract broken at {name}: {arr.shape[1:]} != {shape}"
            )

    def forward(
        self,
        batch: np.ndarray,
        mode: str = "eval",
        tape: Tape | None = None,
        update_stats: bool | None = None,
    ) -> ForwardResult:
        """Run the network; mode selects batch-norm behavior.

        intermediates holds the per-branch taps: 'st' (spectral-temporal,
        [B, n_c, t', F_k]) and 'sst' (after the spatial stage,
        [B, 1, t', F_k]), plus 'concat', 'gap' and 'logits'.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        cfg = self.config
        x = self._check_input(batch)
        t_out = cfg.n_out_timepoints

        h = self.stem.forward(x, tape)
        h = self.stem_bn.forward(h, tape, train=train, update_stats=update_stats)
        h = self.stem_act.forward(h, tape)
        self._expect("stem", h, (cfg.n_channels, t_out, cfg.feature_maps[0]))
        stem_out = h

        taps: list[np.ndarray] = []
        branch_outputs: list[np.ndarray] = []
        for k in range(cfg.n_branches):
            h = self.separables[k].forward(h, tape)
            h = self.separable_bns[k].forward(h, tape, train=train, update_stats=update_stats)
            h = self.separable_acts[k].forward(h, tape)
            self._expect(f"sep{k + 1}", h, (cfg.n_channels, t_out, cfg.feature_maps[k + 1]))
            taps.append(h)
            s = self.spatials[k].forward(h, tape)
            s = self.spatial_bns[k].forward(s, tape, train=train, update_stats=update_stats)
            s = self.spatial_acts[k].forward(s, tape)
            self._expect(f"spatial{k + 1}", s, (1, t_out, cfg.feature_maps[k + 1]))
            branch_outputs.append(s)

        cat = concat_feature_maps(branch_outputs)
        self._expect("concat", cat, (1, t_out, cfg.concat_dim))
        pooled = global_average_pool(cat)
        self._expect("gap", pooled, (1, 1, cfg.concat_dim))
        features = pooled.reshape(pooled.shape[0], cfg.concat_dim)
        logits = self.classifier.logits(features)
        probs = self.classifier.forward(features, tape)

        return ForwardResult(
            probs=probs,
            logits=logits,
            intermediates={
                "stem": stem_out,
                "st": taps,
                "sst": branch_outputs,
                "concat": cat,
                "gap": pooled,
            },
        )

    def backward(self, tape: Tape, g_probs: np.ndarray):
        """Reverse-mode pass over one recorded forward.

        Returns (gradients keyed like parameters(), gradient w.r.t. the
        input batch). Consumes the tape; a second call raises.
        """
        tape.consume()
        cfg = self.config
        grads: dict[str, np.ndarray] = {}

        def absorb(new: dict[str, np.ndarray]) -> None:
            for name, g in new.items():
                grads[name] = grads.get(name, 0) + g

        g_features, g = self.classifier.backward(tape.get("classifier"), g_probs)
        absorb(g)
        g_pooled = g_features.reshape(g_features.shape[0], 1, 1, cfg.concat_dim)
        g_cat = global_average_pool_backward(g_pooled, cfg.n_out_timepoints)
        g_branches = split_feature_maps(g_cat, list(cfg.feature_maps[1:]))

        g_chain: np.ndarray | None = None  # gradient flowing down the shared stack
        for k in reversed(range(cfg.n_branches)):
            gb = g_branches[k]
            gb, g = self.spatial_acts[k].backward(tape.get(f"spatial{k + 1}_act"), gb)
            absorb(g)
            gb, g = self.spatial_bns[k].backward(tape.get(f"spatial{k + 1}_bn"), gb)
            absorb(g)
            g_tap, g = self.spatials[k].backward(tape.get(f"spatial{k + 1}"), gb)
            absorb(g)
            if g_chain is not None:
                g_tap = g_tap + g_chain
            g_tap, g = self.separable_acts[k].backward(tape.get(f"sep{k + 1}_act"), g_tap)
            absorb(g)
            g_tap, g = self.separable_bns[k].backward(tape.get(f"sep{k + 1}_bn"), g_tap)
            absorb(g)
            g_chain, g = self.separables[k].backward(tape.get(f"sep{k + 1}"), g_tap)
            absorb(g)

        gs, g = self.stem_act.backward(tape.get("stem_act"), g_chain)
        absorb(g)
        gs, g = self.stem_bn.backward(tape.get("stem_bn"), gs)
        absorb(g)
        g_input, g = self.stem.backward(tape.get("stem"), gs)
        absorb(g)
        return grads, g_input

    # -- bookkeeping ---------------------------------------------------------

    def param_count(self) -> ParamCount:
        cfg = self.config
        per_layer = {name: arr.size for name, arr in self.parameters().items()}
        total = sum(per_layer.values())
        f = cfg.feature_maps
        per_map = tuple(
            t * f[k] + f[k] * f[k + 1] for k, t in enumerate(cfg.kernel_sizes)
        )
        shared = tuple(
            t + f[k] * f[k + 1] for k, t in enumerate(cfg.kernel_sizes)
        )
        classifier_weights = cfg.n_classes * cfg.concat_dim
        no_pool = cfg.n_out_timepoints * classifier_weights
        return ParamCount(
            per_layer=per_layer,
            total=total,
            classifier_weights=classifier_weights,
            classifier_weights_without_pooling=no_pool,
            pooling_reduction_factor=cfg.n_out_timepoints,
            separable_weights_per_map=per_map,
            separable_weights_shared_kernel=shared,
        )

    def save(self, path, extra_arrays=None, extra_config=None) -> None:
        save_checkpoint(self, path, extra_arrays, extra_config)

    @classmethod
    def load(cls, path) -> "MsnnModel":
        return load_checkpoint(path).model


@dataclasses.dataclass
class Checkpoint:
    model: MsnnModel
    extra_arrays: dict[str, np.ndarray]
    extra_config: dict[str, str]


def save_checkpoint(
    model: MsnnModel,
    path,
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_config: dict[str, str] | None = None,
) -> None:
    """Versioned binary checkpoint: magic, config key=value block, named
    float64 parameter blocks, trailing CRC32. Round trips are bit-exact."""
    w = ByteWriter()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(CHECKPOINT_VERSION)
    config_entries = dict(model.config.to_dict())
    for key, value in (extra_config or {}).items():
        if key in config_entries:
            raise ValueError(f"extra config key {key!r} collides with a model field")
        config_entries[key] = value
    text = "".join(f"{k}={v}\n" for k, v in sorted(config_entries.items()))
    w.block(text.encode("utf-8"))

    arrays = {**model.parameters(), **model.state_arrays(), **(extra_arrays or {})}
    w.u32(len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        w.string(name)
        w.u8(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.f64_array(arr)
    with open(path, "wb") as fh:
        fh.write(w.finish_with_crc())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    body = verify_trailing_crc(data)
    r = ByteReader(body)
    check_magic_and_version(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config_text = r.block().decode("utf-8")
    entries: dict[str, str] = {}
    for line in config_text.splitlines():
        if line:
            key, _, value = line.partition("=")
            entries[key] = value
    if r.remaining == 0:
        raise FormatError("missing parameter section")
    n_arrays = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name = r.string()
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = r.f64_array(count).reshape(shape)
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected trailing bytes")

    known = {f.name for f in dataclasses.fields(MsnnConfig)}
    config = MsnnConfig.from_dict({k: v for k, v in entries.items() if k in known})
    extra_config = {k: v for k, v in entries.items() if k not in known}

    model = MsnnModel(config)
    extra_arrays: dict[str, np.ndarray] = {}
    params = model.parameters()
    expected = set(params) | set(model.state_arrays())
    for name, arr in arrays.items():
        if name in params:
            if params[name].shape != arr.shape:
                raise FormatError(
                    f"array {name!r} has shape {arr.shape}, expected {params[name].shape}"
                )
            np.copyto(params[name], arr)
        elif name not in expected:
            extra_arrays[name] = arr
    missing = expected - set(arrays)
    if missing:
        raise FormatError(f"checkpoint is missing arrays: {sorted(missing)}")
    for bn in model.batch_norms():
        bn.running_mean = arrays[f"{bn.name}.running_mean"].copy()
        bn.running_var = arrays[f"{bn.name}.running_var"].copy()
        bn.num_updates = int(arrays[f"{bn.name}.num_updates"][0])
    return Checkpoint(model=model, extra_arrays=extra_arrays, extra_config=extra_config)
