"""Epoch datasets, continuous records, synthetic generators and file formats.

Epoch files (magic ``EPCH``) and continuous-record files (magic ``RECD``)
are self-describing little-endian binary containers with a trailing CRC32,
so round trips are bit-exact on the float64 payload.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Sequence

import numpy as np
from scipy import signal as _signal

from .binio import (
    ByteReader,
    ByteWriter,
    FormatError,
    check_magic_and_version,
    verify_trailing_crc,
)

EPOCH_MAGIC = b"EPCH"
RECORD_MAGIC = b"RECD"
FORMAT_VERSION = 1

PARADIGMS = ("mi", "ssvep", "vigilance", "seizure", "synthetic")


@dataclasses.dataclass(frozen=True)
class EpochSet:
    """Labeled fixed-length multichannel epochs.

    epochs has shape [n_trials, n_channels, n_timepoints] (float64),
    labels are integers in [0, n_classes).
    """

    epochs: np.ndarray
    labels: np.ndarray
    fs: float
    channel_names: tuple[str, ...]
    n_classes: int
    paradigm: str = "synthetic"

    def __post_init__(self):
        epochs = np.asarray(self.epochs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "epochs", epochs)
        object.__setattr__(self, "labels", labels)
        if epochs.ndim != 3:
            raise ValueError(f"epochs must be rank 3, got shape {epochs.shape}")
        if labels.shape != (epochs.shape[0],):
            raise ValueError("labels length must equal the number of trials")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(
                f"labels must lie in [0, {self.n_classes}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        if len(self.channel_names) != epochs.shape[1]:
            raise ValueError("channel_names length must equal the channel count")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}; options: {PARADIGMS}")

    @property
    def n_trials(self) -> int:
        return self.epochs.shape[0]

    @property
    def n_channels(self) -> int:
        return self.epochs.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.epochs.shape[2]

    def subset(self, indices) -> "EpochSet":
        idx = np.asarray(indices, dtype=np.int64)
        return dataclasses.replace(
            self, epochs=self.epochs[idx].copy(), labels=self.labels[idx].copy()
        )

    def with_epochs(self, epochs: np.ndarray) -> "EpochSet":
        return dataclasses.replace(self, epochs=np.asarray(epochs, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class ContinuousRecord:
    """A continuous multichannel recording with event annotations.

    Annotations are (onset_sample, offset_sample, label) triples, in-bounds
    and mutually non-overlapping.
    """

    samples: np.ndarray  # [n_channels, n_samples]
    fs: float
    channel_names: tuple[str, ...]
    annotations: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(
            self,
            "annotations",
            tuple((int(a), int(b), int(c)) for a, b, c in self.annotations),
        )
        if samples.ndim != 2:
            raise ValueError("samples must be a [channels, samples] matrix")
        if len(self.channel_names) != samples.shape[0]:
            raise ValueError("channel_names length must equal the channel count")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        n = samples.shape[1]
        last_end = -1
        for onset, offset, _label in sorted(self.annotations):
            if not (0 <= onset < offset <= n):
                raise ValueError(f"annotation ({onset}, {offset}) out of bounds")
            if onset < last_end:
                raise ValueError("annotations overlap")
            last_end = offset

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs


@dataclasses.dataclass(frozen=True)
class ClassSpec:
    """One synthetic class: a narrow-band oscillation on designated channels.

    ``amplitude`` may be a scalar (same weight on every active channel) or a
    per-active-channel sequence, which acts as a channel mixing vector.
    """

    band_hz: tuple[float, float]
    channels: tuple[int, ...]
    amplitude: float | tuple[float, ...] = 1.0

    def amplitudes(self) -> np.ndarray:
        if np.isscalar(self.amplitude):
            return np.full(len(self.channels), float(self.amplitude))
        amps = np.asarray(self.amplitude, dtype=np.float64)
        if amps.shape != (len(self.channels),):
            raise ValueError("per-channel amplitude length must match channels")
        return amps


@dataclasses.dataclass(frozen=True)
class SynthResult:
    epochs: EpochSet
    truth: dict


def _default_channel_names(n: int) -> tuple[str, ...]:
    return tuple(f"ch{i:02d}" for i in range(n))


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...], alpha: float = 0.95) -> np.ndarray:
    """Low-frequency-weighted background noise with unit stationary variance.

    White noise pushed through a leaky accumulator y[t] = alpha*y[t-1] + w[t],
    rescaled so the stationary variance is 1.
    """
    white = rng.standard_normal(shape)
    shaped = _signal.lfilter([1.0], [1.0, -alpha], white, axis=-1)
    return shaped * np.sqrt(1.0 - alpha * alpha)


def _interleaved_labels(n_trials: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n_trials, dtype=np.int64) % n_classes
    rng.shuffle(labels)
    return labels


def synth_bandpower(
    n_trials: int,
    n_channels: int,
    n_timepoints: int,
    fs: float,
    classes: Sequence[ClassSpec],
    noise_sigma: float = 1.0,
    seed: int = 0,
) -> SynthResult:
    """Trials of background noise plus a class-specific oscillation.

    Each trial carries the tone of its class (at the band center frequency,
    random phase) on that class's designated channels, on top of shared
    pink-ish background noise of standard deviation ``noise_sigma``.
    """
    if not classes:
        raise ValueError("at least one class spec is required")
    nyquist = fs / 2.0
    for k, spec in enumerate(classes):
        lo, hi = spec.band_hz
        if not (0 < lo <= hi < nyquist):
            raise ValueError(f"class {k}: band {spec.band_hz} outside (0, {nyquist})")
        for c in spec.channels:
            if not (0 <= c < n_channels):
                raise ValueError(f"class {k}: channel {c} out of range")

    rng = np.random.default_rng(seed)
    labels = _interleaved_labels(n_trials, len(classes), rng)
    t = np.arange(n_timepoints) / fs
    epochs = np.zeros((n_trials, n_channels, n_timepoints))
    if noise_sigma > 0:
        epochs += noise_sigma * pink_noise(rng, epochs.shape)
    for i, label in enumerate(labels):
        spec = classes[label]
        freq = 0.5 * (spec.band_hz[0] + spec.band_hz[1])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tone = np.sin(2.0 * np.pi * freq * t + phase)
        epochs[i, list(spec.channels), :] += spec.amplitudes()[:, None] * tone

    eset = EpochSet(
        epochs=epochs,
        labels=labels,
        fs=fs,
        channel_names=_default_channel_names(n_channels),
        n_classes=len(classes),
        paradigm="synthetic",
    )
    truth = {
        "generator": "bandpower",
        "seed": seed,
        "noise_sigma": noise_sigma,
        "classes": [
            {
                "band_hz": list(spec.band_hz),
                "center_hz": 0.5 * (spec.band_hz[0] + spec.band_hz[1]),
                "channels": list(spec.channels),
                "amplitude": np.asarray(spec.amplitudes()).tolist(),
            }
            for spec in classes
        ],
    }
    return SynthResult(eset, truth)


def synth_ssvep(
    n_trials: int,
    n_channels: int,
    n_timepoints: int,
    fs: float,
    freqs: Sequence[float] = (5.45, 6.67, 8.57, 12.0),
    active_channels: Sequence[int] | None = None,
    amplitude: float = 1.0,
    snr: float = 2.0,
    seed: int = 0,
) -> SynthResult:
    """Flicker-locked classes: a target-frequency tone plus its second
    harmonic at half amplitude on an occipital-like channel subset.

    ``snr`` is the tone-to-noise RMS ratio on active channels; pass
    ``float('inf')`` for noise-free trials.
    """
    nyquist = fs / 2.0
    for f in freqs:
        if not (0 < 2 * f < nyquist):
            raise ValueError(f"stimulus {f} Hz: second harmonic exceeds Nyquist {nyquist}")
    if active_channels is None:
        active_channels = tuple(range(max(0, n_channels - 4), n_channels))
    active_channels = tuple(int(c) for c in active_channels)
    for c in active_channels:
        if not (0 <= c < n_channels):
            raise ValueError(f"active channel {c} out of range")

    signal_rms = amplitude * np.sqrt(0.5 + 0.5 * 0.25)  # tone + half-amplitude harmonic
    noise_sigma = 0.0 if np.isinf(snr) else signal_rms / snr

    rng = np.random.default_rng(seed)
    labels = _interleaved_labels(n_trials, len(freqs), rng)
    t = np.arange(n_timepoints) / fs
    epochs = np.zeros((n_trials, n_channels, n_timepoints))
    if noise_sigma > 0:
        epochs += noise_sigma * pink_noise(rng, epochs.shape)
    for i, label in enumerate(labels):
        f = freqs[label]
        p1 = rng.uniform(0.0, 2.0 * np.pi)
        p2 = rng.uniform(0.0, 2.0 * np.pi)
        tone = amplitude * np.sin(2 * np.pi * f * t + p1)
        tone += 0.5 * amplitude * np.sin(2 * np.pi * 2 * f * t + p2)
        epochs[i, list(active_channels), :] += tone

    eset = EpochSet(
        epochs=epochs,
        labels=labels,
        fs=fs,
        channel_names=_default_channel_names(n_channels),
        n_classes=len(freqs),
        paradigm="ssvep",
    )
    truth = {
        "generator": "ssvep",
        "seed": seed,
        "freqs_hz": list(freqs),
        "active_channels": list(active_channels),
        "amplitude": amplitude,
        "snr": None if np.isinf(snr) else snr,
    }
    return SynthResult(eset, truth)


def synth_seizure_record(
    n_channels: int,
    fs: float,
    duration_s: float,
    n_events: int,
    event_s: float,
    burst_band_hz: tuple[float, float] = (18.0, 24.0),
    amplitude_ratio: float = 4.0,
    min_gap_s: float = 15.0,
    edge_margin_s: float = 10.0,
    seed: int = 0,
) -> ContinuousRecord:
    """Background noise with annotated high-amplitude band-limited bursts.

    Event placement is random but respects the edge margins and a minimum
    inter-event gap, so annotations never overlap. The burst tone amplitude
    is chosen so event-window RMS exceeds ``amplitude_ratio`` times the
    background RMS.
    """
    lo, hi = burst_band_hz
    if not (0 < lo <= hi < fs / 2):
        raise ValueError(f"burst band {burst_band_hz} outside (0, {fs / 2})")
    n_samples = int(round(duration_s * fs))
    event_len = int(round(event_s * fs))
    gap = int(round(min_gap_s * fs))
    edge = int(round(edge_margin_s * fs))
    needed = n_events * event_len + max(0, n_events - 1) * gap + 2 * edge
    if needed > n_samples:
        raise ValueError(
            f"cannot place {n_events} events of {event_s}s with gap {min_gap_s}s "
            f"in a {duration_s}s record"
        )

    rng = np.random.default_rng(seed)
    slack = n_samples - needed
    offsets = np.sort(rng.integers(0, slack + 1, size=n_events))
    onsets = [edge + int(offsets[i]) + i * (event_len + gap) for i in range(n_events)]

    samples = pink_noise(rng, (n_channels, n_samples))
    burst_amp = amplitude_ratio * np.sqrt(2.0)  # background RMS is 1 by construction
    center = 0.5 * (lo + hi)
    annotations = []
    for onset in onsets:
        t = np.arange(event_len) / fs
        phase = rng.uniform(0.0, 2.0 * np.pi)
        burst = burst_amp * np.sin(2 * np.pi * center * t + phase)
        samples[:, onset : onset + event_len] += burst
        annotations.append((onset, onset + event_len, 1))

    return ContinuousRecord(
        samples=samples,
        fs=fs,
        channel_names=_default_channel_names(n_channels),
        annotations=tuple(annotations),
    )


def event_epochs(
    record: ContinuousRecord, epoch_s: float, stride_s: float | None = None
) -> list[np.ndarray]:
    """Windows fully inside each annotation (default non-overlapping)."""
    win = int(round(epoch_s * record.fs))
    if win <= 0 or win > record.n_samples:
        raise ValueError("epoch length must fit inside the record")
    stride = win if stride_s is None else max(1, int(round(stride_s * record.fs)))
    out = []
    for onset, offset, _label in record.annotations:
        start = onset
        while start + win <= offset:
            out.append(record.samples[:, start : start + win])
            start += stride
    return out


def background_epochs(
    record: ContinuousRecord, epoch_s: float, clear_margin_s: float = 5.0
) -> list[np.ndarray]:
    """Non-overlapping windows at least clear_margin_s from every annotation."""
    win = int(round(epoch_s * record.fs))
    if win <= 0 or win > record.n_samples:
        raise ValueError("epoch length must fit inside the record")
    margin = int(round(clear_margin_s * record.fs))
    blocked = np.zeros(record.n_samples, dtype=bool)
    for onset, offset, _label in record.annotations:
        blocked[max(0, onset - margin) : min(record.n_samples, offset + margin)] = True
    out = []
    start = 0
    while start + win <= record.n_samples:
        if not blocked[start : start + win].any():
            out.append(record.samples[:, start : start + win])
            start += win
        else:
            start += max(1, win // 4)
    return out


def epochs_from_record(
    record: ContinuousRecord,
    epoch_s: float,
    ictal_stride_s: float | None = None,
    clear_margin_s: float = 5.0,
    max_per_class: int | None = None,
) -> EpochSet:
    """Cut a binary training set (0 = background, 1 = event) from a record.

    Event epochs are windows fully inside an annotation (stride
    ``ictal_stride_s``, default non-overlapping); background epochs are
    non-overlapping windows at least ``clear_margin_s`` away from every
    annotation, evenly thinned to the event-epoch count so classes balance.
    """
    positives = event_epochs(record, epoch_s, ictal_stride_s)
    negatives = background_epochs(record, epoch_s, clear_margin_s)
    if not positives or not negatives:
        raise ValueError("record yields an empty class; adjust epoch length or margins")
    n_keep = len(positives) if max_per_class is None else min(max_per_class, len(positives))
    positives = positives[:n_keep]
    neg_idx = np.linspace(0, len(negatives) - 1, min(len(negatives), n_keep)).astype(int)
    negatives = [negatives[i] for i in neg_idx]

    epochs = np.stack(negatives + positives)
    labels = np.array([0] * len(negatives) + [1] * len(positives), dtype=np.int64)
    return EpochSet(
        epochs=epochs,
        labels=labels,
        fs=record.fs,
        channel_names=record.channel_names,
        n_classes=2,
        paradigm="seizure",
    )


def label_from_score(scores, thresholds: tuple[float, float] = (0.35, 0.7)) -> np.ndarray:
    """Map continuous drowsiness-style scores onto {0 awake, 1 tired, 2 drowsy}.

    Boundary scores go to the higher class: score == t1 labels 1.
    """
    t1, t2 = thresholds
    if not t1 < t2:
        raise ValueError(f"thresholds must increase, got {thresholds}")
    scores = np.asarray(scores, dtype=np.float64)
    return np.digitize(scores, [t1, t2], right=False).astype(np.int64)


def _stratified_chunks(labels: np.ndarray, k: int, rng: np.random.Generator):
    """Per-class shuffled index chunks, class-balanced across k folds."""
    chunks: list[list[np.ndarray]] = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        if idx.size < k:
            warnings.warn(
                f"class {cls} has only {idx.size} samples for {k} folds; "
                "some folds will miss it"
            )
        splits = np.array_split(idx, k)
        for fold, part in enumerate(splits):
            chunks[fold].append(part)
    return [np.sort(np.concatenate(parts)) if parts else np.array([], dtype=np.int64) for parts in chunks]


def kfold(dataset: EpochSet | np.ndarray, k: int, seed: int = 0):
    """Stratified k-fold index splits: list of (train_idx, test_idx)."""
    labels = dataset.labels if isinstance(dataset, EpochSet) else np.asarray(dataset)
    n = labels.shape[0]
    if k < 2 or k > n:
        raise ValueError(f"k must lie in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    test_folds = _stratified_chunks(labels, k, rng)
    all_idx = np.arange(n)
    splits = []
    for test_idx in test_folds:
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        splits.append((all_idx[mask], test_idx))
    return splits


def leave_one_record_out(records: Sequence[ContinuousRecord], seizure_flags: Sequence[bool]):
    """One split per event-bearing record; event-free records always train."""
    if len(records) != len(seizure_flags):
        raise ValueError("records and seizure_flags must align")
    seizure_idx = [i for i, f in enumerate(seizure_flags) if f]
    if len(seizure_idx) < 2:
        raise ValueError("leave-one-record-out needs at least 2 seizure records")
    splits = []
    for test_i in seizure_idx:
        train = [records[i] for i in range(len(records)) if i != test_i]
        splits.append((train, records[test_i]))
    return splits


# ---------------------------------------------------------------------------
# EPCH / RECD containers
# ---------------------------------------------------------------------------


def write_epochs(path, eset: EpochSet) -> None:
    w = ByteWriter()
    w.raw(EPOCH_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(eset.n_trials)
    w.u32(eset.n_channels)
    w.u32(eset.n_timepoints)
    w.f64(eset.fs)
    w.u16(eset.n_classes)
    w.u8(PARADIGMS.index(eset.paradigm))
    for name in eset.channel_names:
        w.string(name)
    for label in eset.labels:
        w.u16(int(label))
    w.f64_array(eset.epochs)
    with open(path, "wb") as fh:
        fh.write(w.finish_with_crc())


def read_epochs(path) -> EpochSet:
    with open(path, "rb") as fh:
        data = fh.read()
    body = verify_trailing_crc(data)
    r = ByteReader(body)
    check_magic_and_version(r, EPOCH_MAGIC, FORMAT_VERSION)
    n_trials, n_c, n_t = r.u32(), r.u32(), r.u32()
    fs = r.f64()
    n_classes = r.u16()
    tag = r.u8()
    if tag >= len(PARADIGMS):
        raise FormatError(f"unknown paradigm tag {tag}")
    names = tuple(r.string() for _ in range(n_c))
    labels = np.array([r.u16() for _ in range(n_trials)], dtype=np.int64)
    if labels.size and labels.max() >= n_classes:
        raise FormatError(
            f"label {labels.max()} out of range for {n_classes} classes"
        )
    epochs = r.f64_array(n_trials * n_c * n_t).reshape(n_trials, n_c, n_t)
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected trailing bytes")
    return EpochSet(
        epochs=epochs,
        labels=labels,
        fs=fs,
        channel_names=names,
        n_classes=n_classes,
        paradigm=PARADIGMS[tag],
    )


def write_record(path, record: ContinuousRecord) -> None:
    w = ByteWriter()
    w.raw(RECORD_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(record.n_channels)
    w.u64(record.n_samples)
    w.f64(record.fs)
    for name in record.channel_names:
        w.string(name)
    w.u32(len(record.annotations))
    for onset, offset, label in record.annotations:
        w.u64(onset)
        w.u64(offset)
        w.u16(label)
    w.f64_array(record.samples)
    with open(path, "wb") as fh:
        fh.write(w.finish_with_crc())


def read_record(path) -> ContinuousRecord:
    with open(path, "rb") as fh:
        data = fh.read()
    body = verify_trailing_crc(data)
    r = ByteReader(body)
    check_magic_and_version(r, RECORD_MAGIC, FORMAT_VERSION)
    n_c = r.u32()
    n_samples = r.u64()
    fs = r.f64()
    names = tuple(r.string() for _ in range(n_c))
    n_ann = r.u32()
    annotations = tuple((r.u64(), r.u64(), r.u16()) for _ in range(n_ann))
    samples = r.f64_array(n_c * n_samples).reshape(n_c, n_samples)
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected trailing bytes")
    return ContinuousRecord(
        samples=samples, fs=fs, channel_names=names, annotations=annotations
    )


def write_labels_csv(path, eset: EpochSet) -> None:
    with open(path, "w") as fh:
        fh.write("trial,label\n")
        for i, label in enumerate(eset.labels):
            fh.write(f"{i},{int(label)}\n")


def write_annotations_csv(path, record: ContinuousRecord) -> None:
    with open(path, "w") as fh:
        fh.write("onset_sample,offset_sample,label,onset_s,offset_s\n")
        for onset, offset, label in record.annotations:
            fh.write(
                f"{onset},{offset},{label},{onset / record.fs:.17g},{offset / record.fs:.17g}\n"
            )
