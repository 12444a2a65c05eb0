"""FastAPI service wrapping the engine; the CLI is one of its clients.

Endpoints operate on workspace directories on the service host. Matrix
artifacts stay on disk; responses carry file paths plus summary JSON.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import FaasimError
from ..workbench import GenSpec
from ..workflows import (
    compare_workspace,
    generate_workspace,
    ingest_workspace,
    partition_workspace,
    run_workspace,
)
from .schemas import (
    CompareRequest,
    CompareResponse,
    GenerateRequest,
    GenerateResponse,
    HealthResponse,
    IngestRequest,
    PartitionRequest,
    PartitionResponse,
    RunRequest,
    RunResponse,
)

__all__ = ["create_app"]


def create_app() -> FastAPI:
    app = FastAPI(title="faasim", version=__version__)

    @app.exception_handler(FaasimError)
    async def engine_error(_: Request, exc: FaasimError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def missing_file(_: Request, exc: FileNotFoundError) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/generate", response_model=GenerateResponse)
    def generate(request: GenerateRequest) -> GenerateResponse:
        spec = GenSpec(
            neurons=request.neurons,
            layers=request.layers,
            nnz_per_row=request.nnz_per_row,
            batch=request.batch,
            input_density=request.input_density,
            seed=request.seed,
        )
        return GenerateResponse(**generate_workspace(spec, request.out_dir))

    @app.post("/ingest", response_model=GenerateResponse)
    def ingest(request: IngestRequest) -> GenerateResponse:
        return GenerateResponse(
            **ingest_workspace(
                request.layer_paths,
                request.inputs_path,
                request.neurons,
                request.batch,
                request.out_dir,
                bias=request.bias,
                y_max=request.y_max,
            )
        )

    @app.post("/partition", response_model=PartitionResponse)
    def partition(request: PartitionRequest) -> PartitionResponse:
        return PartitionResponse(
            **partition_workspace(
                request.out_dir,
                request.workers,
                scheme=request.scheme,
                epsilon=request.epsilon,
                seed=request.seed,
            )
        )

    @app.post("/run", response_model=RunResponse)
    def run(request: RunRequest) -> RunResponse:
        return RunResponse(
            **run_workspace(
                request.out_dir,
                request.workers,
                request.channel,
                branching=request.branching,
                memory_mb=request.memory_mb,
                seed=request.seed,
                pricing=request.pricing.to_config() if request.pricing else None,
                verify=request.verify,
                repeats=request.repeats,
            )
        )

    @app.post("/compare", response_model=CompareResponse)
    def compare(request: CompareRequest) -> CompareResponse:
        return CompareResponse(
            **compare_workspace(
                request.out_dir,
                request.workers,
                channels=request.channels,
                scheme=request.scheme,
                epsilon=request.epsilon,
                branching=request.branching,
                memory_mb=request.memory_mb,
                seed=request.seed,
                pricing=request.pricing.to_config() if request.pricing else None,
                repeats=request.repeats,
            )
        )

    return app
