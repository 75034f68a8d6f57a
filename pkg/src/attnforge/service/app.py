"""HTTP facade over the command layer.

Every response body is a report dict (see report.py).  Status codes
mirror the exit-code contract: malformed input (exit_code 2) maps to
HTTP 422, everything else (including tolerance failures, exit_code 1)
returns 200 with the verdict in the body, since the request itself was
well-formed and fully served.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, commands
from .models import (BenchRequest, CheckRequest, EmitRequest,
                     GradcheckRequest, ScheduleRequest)


def _respond(report: dict) -> JSONResponse:
    status = 422 if report["exit_code"] == 2 else 200
    return JSONResponse(status_code=status, content=report)


def create_app() -> FastAPI:
    app = FastAPI(title="attnforge", version=__version__)

    @app.get("/v1/health")
    def health() -> dict:
        return {"ok": True, "version": __version__}

    @app.get("/v1/variants")
    def variants() -> JSONResponse:
        return _respond(commands.cmd_list())

    @app.post("/v1/check")
    def check(req: CheckRequest) -> JSONResponse:
        return _respond(commands.cmd_check(
            variant=req.variant, variant_text=req.variant_text,
            scale=req.scale, seed=req.seed, blocks=req.blocks,
            chunks=req.chunks, overrides=req.overrides.as_dict()))

    @app.post("/v1/gradcheck")
    def gradcheck(req: GradcheckRequest) -> JSONResponse:
        return _respond(commands.cmd_gradcheck(
            variant=req.variant, variant_text=req.variant_text,
            scale=req.scale, seed=req.seed, eps=req.eps,
            samples=req.samples, overrides=req.overrides.as_dict()))

    @app.post("/v1/schedule")
    def schedule(req: ScheduleRequest) -> JSONResponse:
        return _respond(commands.cmd_schedule(
            variant=req.variant, variant_text=req.variant_text,
            device_text=req.device_text, mode=req.mode,
            verify=req.verify, scale=req.scale, seed=req.seed,
            overrides=req.overrides.as_dict()))

    @app.post("/v1/emit")
    def emit(req: EmitRequest) -> JSONResponse:
        return _respond(commands.cmd_emit(
            variant=req.variant, variant_text=req.variant_text,
            device_text=req.device_text, check=req.check,
            scale=req.scale, seed=req.seed,
            overrides=req.overrides.as_dict()))

    @app.post("/v1/bench")
    def bench(req: BenchRequest) -> JSONResponse:
        return _respond(commands.cmd_bench(
            variants=req.variants, variant_texts=req.variant_texts,
            scale=req.scale, seed=req.seed, repeats=req.repeats,
            blocks=req.blocks, chunks=req.chunks,
            overrides=req.overrides.as_dict()))

    return app


app = create_app()
