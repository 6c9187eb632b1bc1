"""FastAPI application wrapping the pipeline.

Endpoints execute synchronously: training runs take minutes, which suits a
local job-runner service driven by the CLI or a notebook. Domain errors map
to 400, bad flag combinations to 422, missing files to 404.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..binio import FormatError
from .schemas import (
    AnalyzeRequest,
    EvalRequest,
    HealthResponse,
    RunResponse,
    SynthRequest,
    TrainRequest,
)


def create_app() -> FastAPI:
    app = FastAPI(
        title="msnn",
        version=__version__,
        description=(
            "Multi-scale network pipeline: synthesize datasets, train, "
            "evaluate (epoch, k-fold, record, leave-one-record-out), analyze."
        ),
    )

    @app.exception_handler(pipeline.UsageError)
    async def usage_error(_req: Request, exc: pipeline.UsageError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def missing_file(_req: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(FormatError)
    async def bad_file(_req: Request, exc: FormatError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    async def domain_error(_req: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=RunResponse)
    def synth(req: SynthRequest) -> RunResponse:
        payload = req.model_dump()
        kind = payload.pop("kind")
        out = payload.pop("out")
        seed = payload.pop("seed")
        force = payload.pop("force")
        result = pipeline.run_synth(kind, out, seed=seed, force=force, **payload)
        return RunResponse(**result)

    @app.post("/train", response_model=RunResponse)
    def train(req: TrainRequest) -> RunResponse:
        result = pipeline.run_train(
            data=req.data,
            out=req.out,
            config=req.config,
            preset=req.preset,
            overrides=req.overrides,
            seed=req.seed,
            force=req.force,
        )
        return RunResponse(**result)

    @app.post("/eval", response_model=RunResponse)
    def evaluate(req: EvalRequest) -> RunResponse:
        modes = [
            req.kfold is not None,
            req.record is not None,
            req.loro,
        ]
        if sum(modes) > 1:
            raise pipeline.UsageError(
                "choose one evaluation mode: kfold, record, or loro"
            )
        if req.kfold is not None:
            if not req.data:
                raise pipeline.UsageError("kfold evaluation needs a dataset")
            result = pipeline.run_eval_kfold(
                data=req.data, out=req.out, k=req.kfold,
                config=req.config, preset=req.preset, overrides=req.overrides,
                seed=req.seed, jobs=req.jobs, force=req.force,
            )
        elif req.loro:
            if not req.records:
                raise pipeline.UsageError("leave-one-record-out needs record paths")
            result = pipeline.run_eval_loro(
                records=req.records, out=req.out,
                config=req.config, preset=req.preset, overrides=req.overrides,
                seed=req.seed, epoch_s=req.epoch_s, ictal_stride_s=req.ictal_stride_s,
                stride=req.stride, threshold=req.threshold,
                min_hold_s=req.min_hold_s, margin_s=req.margin_s, force=req.force,
            )
        elif req.record is not None:
            if not req.checkpoint:
                raise pipeline.UsageError("record evaluation needs a checkpoint")
            result = pipeline.run_eval_record(
                checkpoint=req.checkpoint, record=req.record, out=req.out,
                stride=req.stride, threshold=req.threshold,
                min_hold_s=req.min_hold_s, margin_s=req.margin_s, force=req.force,
            )
        else:
            if not (req.checkpoint and req.data):
                raise pipeline.UsageError(
                    "epoch evaluation needs both a checkpoint and a dataset"
                )
            result = pipeline.run_eval_epochs(
                checkpoint=req.checkpoint, data=req.data, out=req.out, force=req.force
            )
        return RunResponse(**result)

    @app.post("/analyze", response_model=RunResponse)
    def analyze(req: AnalyzeRequest) -> RunResponse:
        result = pipeline.run_analyze(
            checkpoint=req.checkpoint,
            data=req.data,
            out=req.out,
            analyses=req.analyses,
            target_class=req.target_class,
            branches=req.branches,
            stage=req.stage,
            channel=req.channel,
            limit=req.limit,
            epsilon=req.epsilon,
            force=req.force,
        )
        return RunResponse(**result)

    return app


app = create_app()
