"""End-to-end runs behind the service endpoints and the CLI: synthesize,
train, evaluate, analyze.

Every run resolves its configuration up front (defaults, then config file,
then explicit overrides), writes outputs into a fresh directory, and records
wall-clock timestamps only in the manifest so identical config+seed reruns
are byte-identical everywhere else.
"""

from __future__ import annotations

import configparser
import dataclasses
import datetime
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as dataio
from . import preproc
from .data import ClassSpec, ContinuousRecord, EpochSet
from .evaluation import (
    aggregate_folds,
    detect_onsets,
    evaluate,
    sliding_window_trace,
)
from .interpret import activation_patterns, export_features, lrp, relevance_spectrum
from .model import (
    DEFAULT_FEATURE_MAPS,
    DEFAULT_KERNEL_SIZES,
    SSVEP_KERNEL_SIZES,
    MsnnConfig,
    MsnnModel,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, fit

PRESETS = {"mi": DEFAULT_KERNEL_SIZES, "ssvep": SSVEP_KERNEL_SIZES}


class UsageError(ValueError):
    """Bad request/flag combination; maps to exit code 2 and HTTP 422."""


@dataclasses.dataclass(frozen=True)
class PreprocSettings:
    band: tuple[float, float] | None = None
    crop_head_s: float = 0.0
    crop_tail_s: float = 0.0

    def to_config(self) -> dict[str, str]:
        out = {
            "preproc.crop_head_s": repr(self.crop_head_s),
            "preproc.crop_tail_s": repr(self.crop_tail_s),
        }
        if self.band is not None:
            out["preproc.band"] = f"{self.band[0]!r},{self.band[1]!r}"
        return out

    @classmethod
    def from_config(cls, entries: dict[str, str]) -> "PreprocSettings":
        band = None
        if entries.get("preproc.band"):
            lo, hi = entries["preproc.band"].split(",")
            band = (float(lo), float(hi))
        return cls(
            band=band,
            crop_head_s=float(entries.get("preproc.crop_head_s", "0.0")),
            crop_tail_s=float(entries.get("preproc.crop_tail_s", "0.0")),
        )


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def prepare_run_dir(path: str, force: bool = False) -> str:
    if os.path.exists(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path!r} exists and is not empty")
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(run_dir: str, command: str, inputs: dict, outputs: list[str], summary: dict) -> str:
    path = os.path.join(run_dir, "manifest.json")
    payload = {
        "command": command,
        "created_utc": _utcnow(),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "summary": summary,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [
                f"{v:.17g}" if isinstance(v, float) else str(v) for v in row
            ]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------

_SECTIONS = ("model", "train", "preproc")


def parse_config_file(path: str) -> dict[str, str]:
    """Flat section.key=value entries from an INI-style file."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case
    with open(path) as fh:
        parser.read_file(fh)
    entries: dict[str, str] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section [{section}]; options: {_SECTIONS}")
        for key, value in parser.items(section):
            entries[f"{section}.{key}"] = value
    return entries


def _merge_overrides(entries: dict[str, str], overrides: dict[str, str] | None) -> dict[str, str]:
    merged = dict(entries)
    for key, value in (overrides or {}).items():
        if "." not in key or key.split(".", 1)[0] not in _SECTIONS:
            raise UsageError(
                f"override key {key!r} must be section.key with section in {_SECTIONS}"
            )
        merged[key] = value
    return merged


def _tuple_of(text: str, kind=float):
    return tuple(kind(part) for part in text.split(","))


@dataclasses.dataclass
class ResolvedRun:
    model_config: MsnnConfig
    train_config: TrainConfig
    preproc_settings: PreprocSettings
    resolved_text: str


def resolve_run_config(
    eset: EpochSet,
    config_path: str | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
    seed: int | None = None,
) -> ResolvedRun:
    """Merge defaults, config file, preset and overrides against a dataset.

    Data-shaped fields (channels, timepoints, classes, rate) always come
    from the dataset; a preset conflicts with an explicit kernel_sizes
    entry rather than silently losing.
    """
    entries = parse_config_file(config_path) if config_path else {}
    entries = _merge_overrides(entries, overrides)

    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
        if "model.kernel_sizes" in entries:
            raise UsageError(
                "--preset conflicts with an explicit model.kernel_sizes setting"
            )
        entries["model.kernel_sizes"] = ",".join(str(t) for t in PRESETS[preset])

    fs = eset.fs
    if fs != int(fs) or int(fs) % 2 != 0:
        raise UsageError(f"dataset rate {fs} must be an even integer for the stem kernel")

    pp = PreprocSettings(
        band=_tuple_of(entries["preproc.band"]) if "preproc.band" in entries else None,
        crop_head_s=float(entries.get("preproc.crop_head_s", "0.0")),
        crop_tail_s=float(entries.get("preproc.crop_tail_s", "0.0")),
    )
    n_t = eset.n_timepoints
    if pp.crop_head_s or pp.crop_tail_s:
        total = int(round(fs * (pp.crop_head_s + pp.crop_tail_s)))
        n_t = n_t - total
        if n_t <= 0:
            raise UsageError("cropping removes the entire epoch")

    def get(section_key: str, default: str) -> str:
        return entries.get(section_key, default)

    base_seed = 0 if seed is None else int(seed)
    model_config = MsnnConfig(
        n_channels=eset.n_channels,
        n_timepoints=n_t,
        sampling_rate=int(fs),
        n_classes=eset.n_classes,
        kernel_sizes=_tuple_of(
            get("model.kernel_sizes", ",".join(map(str, DEFAULT_KERNEL_SIZES))), int
        ),
        feature_maps=_tuple_of(
            get("model.feature_maps", ",".join(map(str, DEFAULT_FEATURE_MAPS))), int
        ),
        leaky_slope=float(get("model.leaky_slope", "0.01")),
        bn_eps=float(get("model.bn_eps", "1e-05")),
        bn_momentum=float(get("model.bn_momentum", "0.9")),
        effective_fs=float(entries["model.effective_fs"]) if entries.get("model.effective_fs") else None,
        seed=int(get("model.seed", str(base_seed))),
    )
    train_config = TrainConfig(
        batch_size=int(get("train.batch_size", "16")),
        lr0=float(get("train.lr0", "0.03")),
        decay_per_epoch=float(get("train.decay_per_epoch", "0.001")),
        l1=float(get("train.l1", "0.01")),
        l2=float(get("train.l2", "0.001")),
        max_epochs=int(get("train.max_epochs", "200")),
        patience=int(get("train.patience", "20")),
        adam_beta1=float(get("train.adam_beta1", "0.9")),
        adam_beta2=float(get("train.adam_beta2", "0.999")),
        adam_eps=float(get("train.adam_eps", "1e-08")),
        val_fraction=float(get("train.val_fraction", "0.1")),
        seed=int(get("train.seed", str(base_seed))),
    )

    resolved = configparser.ConfigParser()
    resolved.optionxform = str
    for section in _SECTIONS:
        resolved.add_section(section)
    for key, value in model_config.to_dict().items():
        if key not in ("n_channels", "n_timepoints", "sampling_rate", "n_classes"):
            resolved.set("model", key, value)
    for key, value in train_config.to_dict().items():
        resolved.set("train", key, value)
    for key, value in pp.to_config().items():
        resolved.set("preproc", key.split(".", 1)[1], value)
    buf = io.StringIO()
    resolved.write(buf)
    return ResolvedRun(model_config, train_config, pp, buf.getvalue())


def apply_preprocessing(eset: EpochSet, pp: PreprocSettings) -> EpochSet:
    """Band-pass and crop, before normalization stats enter the picture."""
    out = eset
    if pp.band is not None:
        filtered = preproc.bandpass_array(out.epochs, out.fs, pp.band[0], pp.band[1])
        out = out.with_epochs(filtered)
    if pp.crop_head_s or pp.crop_tail_s:
        out = preproc.crop_epochs(out, pp.crop_head_s, pp.crop_tail_s)
    return out


def preprocess_record_samples(
    samples: np.ndarray, fs: float, pp: PreprocSettings, stats: preproc.NormStats
) -> np.ndarray:
    """The frozen train-time conditioning for continuous data (no cropping:
    windows are cut at their training length directly)."""
    out = samples
    if pp.band is not None:
        out = preproc.bandpass_array(out, fs, pp.band[0], pp.band[1])
    return preproc.normalize_samples(stats, out)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def run_synth(
    kind: str,
    out: str,
    seed: int = 0,
    force: bool = False,
    **params,
) -> dict:
    """Write a synthetic dataset (EPCH + ground-truth sidecar) or, for
    'seizure', a directory of annotated records."""
    if kind == "bandpower":
        classes = [
            ClassSpec(tuple(band), tuple(chs), amp if np.isscalar(amp) else tuple(amp))
            for band, chs, amp in zip(
                params["bands"], params["active_channels"], params["amplitudes"]
            )
        ]
        result = dataio.synth_bandpower(
            n_trials=params["trials"],
            n_channels=params["channels"],
            n_timepoints=params["timepoints"],
            fs=params["fs"],
            classes=classes,
            noise_sigma=params["noise_sigma"],
            seed=seed,
        )
    elif kind == "ssvep":
        result = dataio.synth_ssvep(
            n_trials=params["trials"],
            n_channels=params["channels"],
            n_timepoints=params["timepoints"],
            fs=params["fs"],
            freqs=tuple(params["freqs"]),
            active_channels=params.get("active_channels"),
            amplitude=params.get("amplitude", 1.0),
            snr=params.get("snr", 2.0),
            seed=seed,
        )
    elif kind == "seizure":
        return _run_synth_seizure(out, seed=seed, force=force, **params)
    else:
        raise UsageError(f"unknown generator {kind!r}; options: bandpower, ssvep, seizure")

    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    if os.path.exists(out) and not force:
        raise UsageError(f"output file {out!r} exists")
    dataio.write_epochs(out, result.epochs)
    meta_path = out + ".meta.json"
    with open(meta_path, "w") as fh:
        json.dump(result.truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "outputs": [out, meta_path],
        "summary": {
            "n_trials": result.epochs.n_trials,
            "n_channels": result.epochs.n_channels,
            "n_timepoints": result.epochs.n_timepoints,
            "fs": result.epochs.fs,
            "n_classes": result.epochs.n_classes,
        },
    }


def _run_synth_seizure(
    out: str,
    seed: int,
    force: bool,
    records: int = 5,
    channels: int = 8,
    fs: float = 64.0,
    duration_s: float = 150.0,
    events: int = 3,
    event_s: float = 16.0,
    burst_band: tuple[float, float] = (18.0, 24.0),
    amplitude_ratio: float = 4.0,
    min_gap_s: float = 15.0,
    edge_margin_s: float = 10.0,
) -> dict:
    run_dir = prepare_run_dir(out, force)
    outputs = []
    meta = {"generator": "seizure", "seed": seed, "records": []}
    for i in range(records):
        record = dataio.synth_seizure_record(
            n_channels=channels,
            fs=fs,
            duration_s=duration_s,
            n_events=events,
            event_s=event_s,
            burst_band_hz=tuple(burst_band),
            amplitude_ratio=amplitude_ratio,
            min_gap_s=min_gap_s,
            edge_margin_s=edge_margin_s,
            seed=seed + i,
        )
        path = os.path.join(run_dir, f"record_{i:02d}.rec")
        dataio.write_record(path, record)
        ann_path = os.path.join(run_dir, f"record_{i:02d}.annotations.csv")
        dataio.write_annotations_csv(ann_path, record)
        outputs += [path, ann_path]
        meta["records"].append(
            {"path": os.path.basename(path), "annotations": list(record.annotations)}
        )
    meta_path = os.path.join(run_dir, "meta.json")
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(meta_path)
    return {"outputs": outputs, "summary": {"records": records, "events_per_record": events}}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_on_epochs(
    train_set: EpochSet,
    model_config: MsnnConfig,
    train_config: TrainConfig,
    pp: PreprocSettings,
):
    """Shared train path: preprocess, fit normalization on the training set
    only, fit the model. Returns (fit result, norm stats)."""
    prepared = apply_preprocessing(train_set, pp)
    stats = preproc.fit_normalization(prepared)
    prepared = preproc.apply_normalization(stats, prepared)
    model = MsnnModel.build(model_config)
    result = fit(model, prepared, train_config)
    return result, stats


def _save_trained(path, result, stats, pp: PreprocSettings, train_config: TrainConfig):
    extra_config = {**pp.to_config()}
    for key, value in train_config.to_dict().items():
        extra_config[f"train.{key}"] = value
    save_checkpoint(
        result.model,
        path,
        extra_arrays={"norm.mean": stats.mean, "norm.std": stats.std},
        extra_config=extra_config,
    )


def run_train(
    data: str,
    out: str,
    config: str | None = None,
    preset: str | None = None,
    overrides: dict[str, str] | None = None,
    seed: int | None = None,
    force: bool = False,
) -> dict:
    eset = dataio.read_epochs(data)
    resolved = resolve_run_config(eset, config, overrides, preset, seed)
    run_dir = prepare_run_dir(out, force)

    result, stats = train_on_epochs(
        eset, resolved.model_config, resolved.train_config, resolved.preproc_settings
    )

    ckpt_path = os.path.join(run_dir, "checkpoint.msnn")
    _save_trained(ckpt_path, result, stats, resolved.preproc_settings, resolved.train_config)
    report_path = os.path.join(run_dir, "report.json")
    with open(report_path, "w") as fh:
        fh.write(result.report.to_json())
        fh.write("\n")
    config_path = os.path.join(run_dir, "config.resolved.ini")
    with open(config_path, "w") as fh:
        fh.write(resolved.resolved_text)
    outputs = [ckpt_path, report_path, config_path]
    summary = {
        "best_epoch": result.report.best_epoch,
        "best_val_accuracy": result.report.best_val_accuracy,
        "n_epochs": result.report.n_epochs,
        "stopped_early": result.report.stopped_early,
    }
    write_manifest(run_dir, "train", {"data": data, "config": config, "preset": preset}, outputs, summary)
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_trained(checkpoint: str):
    ckpt = load_checkpoint(checkpoint)
    if "norm.mean" not in ckpt.extra_arrays or "norm.std" not in ckpt.extra_arrays:
        raise ValueError(f"checkpoint {checkpoint!r} carries no normalization statistics")
    stats = preproc.NormStats(
        mean=ckpt.extra_arrays["norm.mean"], std=ckpt.extra_arrays["norm.std"]
    )
    pp = PreprocSettings.from_config(ckpt.extra_config)
    return ckpt.model, stats, pp


def _eval_epochs_with(model, stats, pp, eset: EpochSet):
    prepared = apply_preprocessing(eset, pp)
    prepared = preproc.apply_normalization(stats, prepared)
    return evaluate(model, prepared)


def _confusion_rows(confusion):
    return [list(row) for row in confusion.counts]


def _write_eval_outputs(run_dir, tag, ev):
    metrics_path = os.path.join(run_dir, f"{tag}metrics.json")
    with open(metrics_path, "w") as fh:
        json.dump(ev.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    confusion_path = os.path.join(run_dir, f"{tag}confusion.csv")
    n = ev.confusion.counts.shape[0]
    write_csv(
        confusion_path,
        ["true_class"] + [f"pred_{j}" for j in range(n)],
        [[i] + list(ev.confusion.counts[i]) for i in range(n)],
    )
    norm_path = os.path.join(run_dir, f"{tag}confusion_normalized.csv")
    normalized = ev.confusion.normalized()
    write_csv(
        norm_path,
        ["true_class"] + [f"pred_{j}" for j in range(n)],
        [[i] + [float(v) for v in normalized[i]] for i in range(n)],
    )
    return [metrics_path, confusion_path, norm_path]


def run_eval_kfold(
    data: str,
    out: str,
    k: int,
    config: str | None = None,
    preset: str | None = None,
    overrides: dict[str, str] | None = None,
    seed: int | None = None,
    jobs: int = 1,
    force: bool = False,
) -> dict:
    """Stratified k-fold cross-validation: a fresh model per fold, trained
    on the fold's training split and scored on its held-out split."""
    eset = dataio.read_epochs(data)
    base_seed = 0 if seed is None else int(seed)
    folds = dataio.kfold(eset, k, seed=base_seed)
    run_dir = prepare_run_dir(out, force)

    args = [
        (data, fold_index, train_idx.tolist(), test_idx.tolist(), config, preset, overrides, base_seed)
        for fold_index, (train_idx, test_idx) in enumerate(folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fold_reports = list(pool.map(_kfold_worker, args))
    else:
        fold_reports = [_kfold_worker(a) for a in args]

    outputs = []
    for fold_index, report in enumerate(fold_reports):
        path = os.path.join(run_dir, f"fold_{fold_index}.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.append(path)
    aggregate = aggregate_folds(fold_reports)
    agg_path = os.path.join(run_dir, "aggregate.json")
    with open(agg_path, "w") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(agg_path)
    summary = {"k": k, "mean_accuracy": aggregate["accuracy"]["mean"]}
    write_manifest(run_dir, "eval-kfold", {"data": data, "k": k}, outputs, summary)
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


def _kfold_worker(args) -> dict:
    (data_path, fold_index, train_idx, test_idx, config, preset, overrides, base_seed) = args
    eset = dataio.read_epochs(data_path)
    # independent RNG stream per fold, derived from (seed, fold index)
    fold_seed = int(np.random.default_rng([base_seed, fold_index]).integers(0, 2**31))
    resolved = resolve_run_config(eset, config, overrides, preset, fold_seed)
    train_set = eset.subset(np.array(train_idx))
    test_set = eset.subset(np.array(test_idx))
    result, stats = train_on_epochs(
        train_set, resolved.model_config, resolved.train_config, resolved.preproc_settings
    )
    ev = _eval_epochs_with(result.model, stats, resolved.preproc_settings, test_set)
    return {
        "fold": fold_index,
        "accuracy": ev.accuracy,
        "best_epoch": result.report.best_epoch,
        "best_val_accuracy": result.report.best_val_accuracy,
        "n_epochs": result.report.n_epochs,
        "n_test": ev.n_samples,
    }


def run_eval_epochs(
    checkpoint: str,
    data: str,
    out: str,
    force: bool = False,
) -> dict:
    model, stats, pp = _load_trained(checkpoint)
    eset = dataio.read_epochs(data)
    run_dir = prepare_run_dir(out, force)
    ev = _eval_epochs_with(model, stats, pp, eset)
    outputs = _write_eval_outputs(run_dir, "", ev)
    summary = {"accuracy": ev.accuracy, "n_samples": ev.n_samples}
    write_manifest(run_dir, "eval", {"checkpoint": checkpoint, "data": data}, outputs, summary)
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


def trace_and_detect(
    model: MsnnModel,
    stats: preproc.NormStats,
    pp: PreprocSettings,
    record: ContinuousRecord,
    stride: int,
    threshold: float,
    min_hold_s: float,
    margin_s: float,
):
    conditioned = dataclasses.replace(
        record, samples=preprocess_record_samples(record.samples, record.fs, pp, stats)
    )
    trace = sliding_window_trace(model, conditioned, stride_samples=stride, batch_size=32)
    detection = detect_onsets(
        trace,
        threshold=threshold,
        min_hold_s=min_hold_s,
        fs=record.fs,
        stride_samples=stride,
        annotations=record.annotations,
        margin_s=margin_s,
    )
    return trace, detection


def run_eval_record(
    checkpoint: str,
    record: str,
    out: str,
    stride: int = 1,
    threshold: float = 0.8,
    min_hold_s: float = 1.0,
    margin_s: float = 5.0,
    force: bool = False,
) -> dict:
    model, stats, pp = _load_trained(checkpoint)
    rec = dataio.read_record(record)
    run_dir = prepare_run_dir(out, force)
    trace, detection = trace_and_detect(
        model, stats, pp, rec, stride, threshold, min_hold_s, margin_s
    )
    trace_path = os.path.join(run_dir, "trace.csv")
    dt = stride / rec.fs
    write_csv(
        trace_path,
        ["window_start_s", "probability"],
        [(i * dt, float(p)) for i, p in enumerate(trace)],
    )
    det_path = os.path.join(run_dir, "detections.json")
    with open(det_path, "w") as fh:
        json.dump(detection.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [trace_path, det_path]
    summary = detection.summary()
    write_manifest(run_dir, "eval-record", {"checkpoint": checkpoint, "record": record}, outputs, summary)
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


def run_eval_loro(
    records: list[str],
    out: str,
    config: str | None = None,
    preset: str | None = None,
    overrides: dict[str, str] | None = None,
    seed: int | None = None,
    epoch_s: float = 4.0,
    ictal_stride_s: float = 2.0,
    stride: int = 8,
    threshold: float = 0.8,
    min_hold_s: float = 1.0,
    margin_s: float = 5.0,
    force: bool = False,
) -> dict:
    """Leave-one-record-out: for every event-bearing record, train on
    epochs cut from all other records and run onset detection on it."""
    recs = [dataio.read_record(p) for p in records]
    flags = [len(r.annotations) > 0 for r in recs]
    splits = dataio.leave_one_record_out(recs, flags)
    run_dir = prepare_run_dir(out, force)
    base_seed = 0 if seed is None else int(seed)

    outputs = []
    per_record = []
    test_positions = [i for i, f in enumerate(flags) if f]
    for split_index, (train_recs, test_rec) in enumerate(splits):
        positives: list[np.ndarray] = []
        negatives: list[np.ndarray] = []
        for r in train_recs:
            if r.annotations:
                positives += dataio.event_epochs(r, epoch_s, ictal_stride_s)
            negatives += dataio.background_epochs(r, epoch_s, clear_margin_s=margin_s)
        if not positives or not negatives:
            raise ValueError("training records yield an empty class")
        # balance: thin the background evenly down to the event-epoch count
        keep = np.linspace(0, len(negatives) - 1, min(len(negatives), len(positives))).astype(int)
        negatives = [negatives[i] for i in keep]
        train_set = EpochSet(
            epochs=np.stack(negatives + positives),
            labels=np.array([0] * len(negatives) + [1] * len(positives), dtype=np.int64),
            fs=test_rec.fs,
            channel_names=test_rec.channel_names,
            n_classes=2,
            paradigm="seizure",
        )
        split_seed = int(np.random.default_rng([base_seed, split_index]).integers(0, 2**31))
        resolved = resolve_run_config(train_set, config, overrides, preset, split_seed)
        result, stats = train_on_epochs(
            train_set, resolved.model_config, resolved.train_config, resolved.preproc_settings
        )
        trace, detection = trace_and_detect(
            result.model, stats, resolved.preproc_settings, test_rec,
            stride, threshold, min_hold_s, margin_s,
        )
        record_path = records[test_positions[split_index]]
        report = {
            "record": record_path,
            "n_events": detection.n_events,
            "n_detected": detection.n_detected,
            "false_detections": detection.false_detections,
            "mean_latency_s": detection.mean_latency(),
            "latencies_s": detection.latencies,
        }
        per_record.append(report)
        path = os.path.join(run_dir, f"split_{split_index}.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.append(path)

    latencies = [
        lat for rep in per_record for lat in rep["latencies_s"] if lat is not None
    ]
    summary = {
        "n_records": len(splits),
        "total_events": sum(r["n_events"] for r in per_record),
        "total_detected": sum(r["n_detected"] for r in per_record),
        "total_false_detections": sum(r["false_detections"] for r in per_record),
        "mean_latency_s": float(np.mean(latencies)) if latencies else None,
    }
    agg_path = os.path.join(run_dir, "aggregate.json")
    with open(agg_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(agg_path)
    write_manifest(run_dir, "eval-loro", {"records": records}, outputs, summary)
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

ANALYSES = ("psd", "lrp", "relevance-spectrum", "patterns", "features")


def run_analyze(
    checkpoint: str,
    data: str,
    out: str,
    analyses: list[str],
    target_class: int = 1,
    branches: list[int] | None = None,
    stage: str = "pooled",
    channel: str | None = None,
    limit: int = 8,
    epsilon: float = 1e-6,
    force: bool = False,
) -> dict:
    for name in analyses:
        if name not in ANALYSES:
            raise UsageError(f"unknown analysis {name!r}; options: {', '.join(ANALYSES)}")
    model, stats, pp = _load_trained(checkpoint)
    eset = dataio.read_epochs(data)
    prepared = preproc.apply_normalization(stats, apply_preprocessing(eset, pp))
    run_dir = prepare_run_dir(out, force)
    outputs: list[str] = []
    summary: dict = {}

    if "psd" in analyses:
        idx = _channel_index(eset, channel)
        freqs = power = None
        per_trial = []
        for trial in prepared.epochs:
            freqs, p = preproc.welch_psd(trial[idx], prepared.fs)
            per_trial.append(p)
        power = np.mean(per_trial, axis=0)
        path = os.path.join(run_dir, f"psd_channel_{idx}.csv")
        write_csv(path, ["freq_hz", "power"], zip(freqs.tolist(), power.tolist()))
        outputs.append(path)
        summary["psd_channel"] = idx

    if "lrp" in analyses or "relevance-spectrum" in analyses:
        n = min(limit, prepared.n_trials)
        gaps = []
        spectra = []
        freqs = None
        for i in range(n):
            rmap = lrp(model, prepared.epochs[i], target_class, epsilon)
            gaps.append(rmap.conservation_gap)
            if "lrp" in analyses:
                path = os.path.join(run_dir, f"lrp_epoch_{i:03d}_class_{target_class}.csv")
                write_csv(
                    path,
                    ["channel"] + [f"t{j}" for j in range(rmap.relevance.shape[1])],
                    [[c] + [float(v) for v in row] for c, row in enumerate(rmap.relevance)],
                )
                outputs.append(path)
            if "relevance-spectrum" in analyses:
                freqs, spec = relevance_spectrum(rmap, prepared.fs)
                spectra.append(spec)
        if "relevance-spectrum" in analyses and spectra:
            path = os.path.join(run_dir, f"relevance_spectrum_class_{target_class}.csv")
            write_csv(
                path,
                ["freq_hz", "relevance_power"],
                zip(freqs.tolist(), np.mean(spectra, axis=0).tolist()),
            )
            outputs.append(path)
        summary["lrp_conservation_gap_mean"] = float(np.mean(gaps))
        summary["lrp_conservation_gap_max"] = float(np.max(gaps))
        summary["lrp_epochs"] = n

    if "patterns" in analyses:
        chosen = branches or list(range(1, model.config.n_branches + 1))
        for b in chosen:
            pats = activation_patterns(model, prepared, b)
            raw_path = os.path.join(run_dir, f"patterns_branch_{b}_raw.csv")
            norm_path = os.path.join(run_dir, f"patterns_branch_{b}_normalized.csv")
            header = ["channel"] + [f"filter_{p.filter_index}" for p in pats]
            write_csv(
                raw_path,
                header,
                [[c] + [float(p.raw[c]) for p in pats] for c in range(model.config.n_channels)],
            )
            write_csv(
                norm_path,
                header,
                [[c] + [float(p.normalized[c]) for p in pats] for c in range(model.config.n_channels)],
            )
            outputs += [raw_path, norm_path]
        summary["pattern_branches"] = chosen

    if "features" in analyses:
        feats, labels = export_features(model, prepared, stage)
        path = os.path.join(run_dir, f"features_{stage}.csv")
        write_csv(
            path,
            ["label"] + [f"dim_{j}" for j in range(feats.shape[1])],
            [[int(l)] + [float(v) for v in row] for l, row in zip(labels, feats)],
        )
        outputs.append(path)
        summary["feature_shape"] = list(feats.shape)

    write_manifest(
        run_dir, "analyze", {"checkpoint": checkpoint, "data": data, "analyses": analyses},
        outputs, summary,
    )
    return {"run_dir": run_dir, "outputs": outputs, "summary": summary}


def _channel_index(eset: EpochSet, channel: str | None) -> int:
    if channel is None:
        return 0
    if channel in eset.channel_names:
        return eset.channel_names.index(channel)
    try:
        idx = int(channel)
    except ValueError:
        raise UsageError(
            f"unknown channel {channel!r}; names: {', '.join(eset.channel_names)}"
        ) from None
    if not (0 <= idx < eset.n_channels):
        raise UsageError(f"channel index {idx} out of range [0, {eset.n_channels})")
    return idx
