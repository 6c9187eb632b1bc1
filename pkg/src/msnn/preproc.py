"""Deterministic signal conditioning applied before training and, with
frozen statistics, at test time.

Everything here is a pure function over immutable inputs; identical input
gives bit-identical output, so calls are safe from parallel workers.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import signal as _signal

from .data import EpochSet


@dataclasses.dataclass(frozen=True)
class RawRecord:
    """A continuous multichannel recording plus montage metadata.

    montage maps a channel name to the names of its spatial neighbors; it is
    supplied by the caller because neighbor sets depend on the electrode
    layout of the acquisition, not on anything in the data itself.
    """

    samples: np.ndarray  # [n_channels, n_samples]
    fs: float
    channel_names: tuple[str, ...]
    montage: dict[str, tuple[str, ...]] | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError("samples must be a [channels, samples] matrix")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if len(self.channel_names) != samples.shape[0]:
            raise ValueError("channel_names length must equal the channel count")
        if not np.isfinite(samples).all():
            raise ValueError("samples contain NaN or Inf")
        if self.montage is not None:
            known = set(self.channel_names)
            for ch, neighbors in self.montage.items():
                if ch not in known:
                    raise ValueError(f"montage channel {ch!r} not in channel_names")
                for nb in neighbors:
                    if nb not in known:
                        raise ValueError(f"montage neighbor {nb!r} of {ch!r} unknown")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclasses.dataclass(frozen=True)
class NormStats:
    """Per-channel shift/scale fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be matching vectors")
        if not (std > 0).all():
            raise ValueError("every channel std must be positive")


def bandpass_array(
    x: np.ndarray, fs: float, low_hz: float, high_hz: float, order: int = 4
) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis.

    The filter runs forward and backward, so the passband gain is the
    squared magnitude response and there is no group delay.
    """
    if not (0 < low_hz < high_hz < fs / 2):
        raise ValueError(
            f"band edges must satisfy 0 < low < high < fs/2; "
            f"got ({low_hz}, {high_hz}) at fs {fs}"
        )
    x = np.asarray(x, dtype=np.float64)
    min_len = 3 * (2 * order + 1)
    if x.shape[-1] <= min_len:
        raise ValueError(
            f"signal of {x.shape[-1]} samples is too short to filter "
            f"(need more than {min_len})"
        )
    b, a = _signal.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs)
    return _signal.filtfilt(b, a, x, axis=-1)


def bandpass(record: RawRecord, low_hz: float, high_hz: float, order: int = 4) -> RawRecord:
    return dataclasses.replace(
        record, samples=bandpass_array(record.samples, record.fs, low_hz, high_hz, order)
    )


def montage_indices(
    channel_names: tuple[str, ...], montage: dict[str, tuple[str, ...]]
) -> list[np.ndarray]:
    """Per-channel neighbor index arrays (empty array = no neighbors)."""
    pos = {name: i for i, name in enumerate(channel_names)}
    out = []
    for name in channel_names:
        neighbors = montage.get(name, ())
        out.append(np.array([pos[nb] for nb in neighbors], dtype=np.int64))
    return out


def large_laplacian(record: RawRecord) -> RawRecord:
    """Subtract the mean of each channel's montage neighbors.

    Channels listed with fewer neighbors than a full cross (edge channels)
    just use whatever neighbors they have; channels with none pass through.
    """
    if not record.montage:
        raise ValueError("large_laplacian needs a non-empty montage")
    idx = montage_indices(record.channel_names, record.montage)
    out = record.samples.copy()
    for c, neighbors in enumerate(idx):
        if neighbors.size:
            out[c] -= record.samples[neighbors].mean(axis=0)
    return dataclasses.replace(record, samples=out)


def baseline_correct(epoch: np.ndarray, baseline_mean: np.ndarray) -> np.ndarray:
    """Shift each channel by its pre-stimulus mean; shape is unchanged."""
    epoch = np.asarray(epoch, dtype=np.float64)
    baseline = np.asarray(baseline_mean, dtype=np.float64)
    if baseline.shape != (epoch.shape[0],):
        raise ValueError(
            f"baseline length {baseline.shape} does not match {epoch.shape[0]} channels"
        )
    return epoch - baseline[:, None]


def fit_normalization(train: EpochSet) -> NormStats:
    """Per-channel mean/std over all training trials and timepoints."""
    if train.n_trials == 0:
        raise ValueError("cannot fit normalization on an empty set")
    mean = train.epochs.mean(axis=(0, 2))
    std = train.epochs.std(axis=(0, 2))
    bad = np.flatnonzero(std == 0)
    if bad.size:
        names = ", ".join(train.channel_names[i] for i in bad)
        raise ValueError(f"zero-variance channel(s): {names}")
    return NormStats(mean=mean, std=std)


def apply_normalization(stats: NormStats, epochs: EpochSet) -> EpochSet:
    """Channel-wise affine map only, so inter-channel relations survive."""
    if stats.mean.shape[0] != epochs.n_channels:
        raise ValueError("normalization stats do not match the channel count")
    scaled = (epochs.epochs - stats.mean[None, :, None]) / stats.std[None, :, None]
    return epochs.with_epochs(scaled)


def normalize_samples(stats: NormStats, samples: np.ndarray) -> np.ndarray:
    """Apply frozen stats to a continuous [channels, samples] array."""
    if stats.mean.shape[0] != samples.shape[0]:
        raise ValueError("normalization stats do not match the channel count")
    return (samples - stats.mean[:, None]) / stats.std[:, None]


def crop_epoch(
    epoch: np.ndarray, drop_head_s: float, drop_tail_s: float, fs: float
) -> np.ndarray:
    """Drop the first/last stretches of an epoch along the time axis.

    The total removed length equals round(fs * (head + tail)) samples.
    """
    epoch = np.asarray(epoch, dtype=np.float64)
    n = epoch.shape[-1]
    n_total = int(round(fs * (drop_head_s + drop_tail_s)))
    n_head = int(round(fs * drop_head_s))
    n_tail = n_total - n_head
    if n_head < 0 or n_tail < 0:
        raise ValueError("crop durations must be non-negative")
    if n_total >= n:
        raise ValueError(
            f"cropping {n_total} samples leaves nothing of a {n}-sample epoch"
        )
    return epoch[..., n_head : n - n_tail]


def crop_epochs(epochs: EpochSet, drop_head_s: float, drop_tail_s: float) -> EpochSet:
    return epochs.with_epochs(
        crop_epoch(epochs.epochs, drop_head_s, drop_tail_s, epochs.fs)
    )


def welch_params(fs: float, window_s: float = 1.0) -> tuple[int, int]:
    """Shared Welch segmentation: Hann window of window_s seconds, 50% overlap."""
    nperseg = max(8, int(round(fs * window_s)))
    return nperseg, nperseg // 2


def welch_psd(
    x: np.ndarray, fs: float, window_s: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Welch power spectral density of a single-channel signal.

    Returns (freqs, power) with a one-sided density grid spanning [0, fs/2];
    summing power times the bin width recovers the signal variance for
    broadband inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("welch_psd expects a 1-D signal")
    nperseg, noverlap = welch_params(fs, window_s)
    if x.shape[0] < nperseg:
        raise ValueError(
            f"signal of {x.shape[0]} samples is shorter than one {nperseg}-sample window"
        )
    freqs, power = _signal.welch(
        x,
        fs=fs,
        window="hann",
        nperseg=nperseg,
        noverlap=noverlap,
        detrend="constant",
        scaling="density",
    )
    return freqs, power
