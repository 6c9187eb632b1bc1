"""Pydantic request/response models for the HTTP service.

Requests carry filesystem paths plus run parameters; the service and its
clients are assumed to share a filesystem (the CLI runs the app in-process
by default).
"""

from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, Field


class BandpowerSynthRequest(BaseModel):
    kind: Literal["bandpower"] = "bandpower"
    out: str
    trials: int = 200
    channels: int = 8
    timepoints: int = 256
    fs: float = 128.0
    bands: list[tuple[float, float]] = [(8.0, 12.0), (20.0, 24.0)]
    active_channels: list[list[int]] = [[2, 3], [4, 5]]
    amplitudes: list[float] = [1.5, 1.5]
    noise_sigma: float = 1.0
    seed: int = 0
    force: bool = False


class SsvepSynthRequest(BaseModel):
    kind: Literal["ssvep"] = "ssvep"
    out: str
    trials: int = 160
    channels: int = 8
    timepoints: int = 256
    fs: float = 128.0
    freqs: list[float] = [5.45, 6.67, 8.57, 12.0]
    active_channels: list[int] | None = None
    amplitude: float = 1.0
    snr: float = 2.0
    seed: int = 0
    force: bool = False


class SeizureSynthRequest(BaseModel):
    kind: Literal["seizure"] = "seizure"
    out: str
    records: int = 5
    channels: int = 8
    fs: float = 64.0
    duration_s: float = 150.0
    events: int = 3
    event_s: float = 16.0
    burst_band: tuple[float, float] = (18.0, 24.0)
    amplitude_ratio: float = 4.0
    min_gap_s: float = 15.0
    edge_margin_s: float = 10.0
    seed: int = 0
    force: bool = False


SynthRequest = Annotated[
    Union[BandpowerSynthRequest, SsvepSynthRequest, SeizureSynthRequest],
    Field(discriminator="kind"),
]


class TrainRequest(BaseModel):
    data: str
    out: str
    config: str | None = None
    preset: Literal["mi", "ssvep"] | None = None
    overrides: dict[str, str] = {}
    seed: int | None = None
    force: bool = False


class EvalRequest(BaseModel):
    """One of three modes: epoch scoring (checkpoint+data), k-fold
    cross-validation (data+kfold), record tracing (checkpoint+record),
    or leave-one-record-out (records)."""

    out: str
    checkpoint: str | None = None
    data: str | None = None
    record: str | None = None
    records: list[str] | None = None
    kfold: int | None = None
    loro: bool = False
    config: str | None = None
    preset: Literal["mi", "ssvep"] | None = None
    overrides: dict[str, str] = {}
    seed: int | None = None
    jobs: int = 1
    stride: int = 1
    threshold: float = 0.8
    min_hold_s: float = 1.0
    margin_s: float = 5.0
    epoch_s: float = 4.0
    ictal_stride_s: float = 2.0
    force: bool = False


class AnalyzeRequest(BaseModel):
    checkpoint: str
    data: str
    out: str
    analyses: list[str] = ["lrp", "patterns", "features", "psd", "relevance-spectrum"]
    target_class: int = 1
    branches: list[int] | None = None
    stage: str = "pooled"
    channel: str | None = None
    limit: int = 8
    epsilon: float = 1e-6
    force: bool = False


class RunResponse(BaseModel):
    run_dir: str | None = None
    outputs: list[str]
    summary: dict


class HealthResponse(BaseModel):
    status: str
    version: str
