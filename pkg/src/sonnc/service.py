"""HTTP service wrapping the compiler and executor.

The service holds no per-request state: graphs arrive as JSON documents
and tune tables travel as the text table format, so any client that can
write those files can drive the engine remotely.  Calibration and
benchmarking grab a process-wide lock because they own the machine's
timing while running.
"""

from __future__ import annotations

import threading
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, api, autotune, bench, graphdoc
from .autotune import TABLE_VERSION, loads_table
from .errors import GraphError, SonncError, TableError
from .graph import validate as validate_graph

_machine_lock = threading.Lock()  # timing integrity for calibrate/bench


class VersionResponse(BaseModel):
    package: str
    table_format: int


class ValidateRequest(BaseModel):
    graph: dict


class ValidateResponse(BaseModel):
    diagnostics: list[str]


class PlanRequest(BaseModel):
    graph: dict
    table: Optional[str] = Field(default=None, description="tune table file contents")
    force_b: Optional[int] = None
    force_t: Optional[int] = None
    no_fusion: bool = False
    no_hoist: bool = False


class SelectionModel(BaseModel):
    b: int
    t: int
    predicted_seconds: Optional[float] = None


class PlanResponse(BaseModel):
    text: str
    selection: SelectionModel


class RunRequest(BaseModel):
    graph: dict
    table: Optional[str] = None
    seed: Optional[int] = None
    threads: Optional[int] = None
    force_b: Optional[int] = None
    force_t: Optional[int] = None
    no_fusion: bool = False
    no_hoist: bool = False


class RunResponse(BaseModel):
    iterations: int
    final_cost: float
    stop_reason: str
    cost_history: list[float]
    selection: dict
    outputs: dict[str, list[list[float]]]


class CalibrateRequest(BaseModel):
    max_dim: int = 4096
    max_block: int = 512
    max_threads: Optional[int] = None
    reps: int = 3


class CalibrateResponse(BaseModel):
    table: str
    entries: int


class BenchRequest(BaseModel):
    algo: str
    sparsity: str
    rows: int
    cols: int
    hidden: int
    field: int = 4
    fill: float = 0.1
    runs: int = 10
    iters: int = 100
    table: Optional[str] = None
    no_fusion: bool = False
    no_hoist: bool = False
    force_b: Optional[int] = None
    force_t: Optional[int] = None
    seed: int = 0


class BenchResponse(BaseModel):
    csv: str
    reported_seconds: float
    block_size: int
    threads: int


def _fail(e: SonncError):
    if isinstance(e, TableError):
        kind = "table"
    elif isinstance(e, GraphError):
        kind = "graph"
    else:
        kind = "args"
    raise HTTPException(status_code=400, detail={"kind": kind, "message": str(e)})


def _maybe_table(text: Optional[str]):
    if text is None:
        return None
    return loads_table(text)


# ---------------------------------------------------------------------------
# operations (shared by the HTTP routes and the in-process CLI client)


def op_version() -> VersionResponse:
    return VersionResponse(package=__version__, table_format=TABLE_VERSION)


def op_validate(req: ValidateRequest) -> ValidateResponse:
    try:
        g = graphdoc.parse_document(req.graph)
    except SonncError as e:
        _fail(e)
    return ValidateResponse(diagnostics=validate_graph(g))


def op_plan(req: PlanRequest) -> PlanResponse:
    try:
        g = graphdoc.parse_document(req.graph)
        compiled = api.compile_plan(
            g, table=_maybe_table(req.table),
            no_fusion=req.no_fusion, no_hoist=req.no_hoist,
            force_b=req.force_b, force_t=req.force_t,
        )
    except SonncError as e:
        _fail(e)
    sel = compiled.selection
    pred = None if sel.predicted_seconds != sel.predicted_seconds else sel.predicted_seconds
    return PlanResponse(
        text=api.plan_dump_text(compiled),
        selection=SelectionModel(b=sel.block_size, t=sel.threads, predicted_seconds=pred),
    )


def op_run(req: RunRequest) -> RunResponse:
    try:
        payload = api.run_document(
            req.graph, table=_maybe_table(req.table), seed=req.seed,
            threads=req.threads, force_b=req.force_b, force_t=req.force_t,
            no_fusion=req.no_fusion, no_hoist=req.no_hoist,
        )
    except SonncError as e:
        _fail(e)
    return RunResponse(**payload)


def op_calibrate(req: CalibrateRequest) -> CalibrateResponse:
    try:
        with _machine_lock:
            table = autotune.calibrate(
                max_dim=req.max_dim, max_block=req.max_block,
                max_threads=req.max_threads, reps=req.reps,
            )
    except SonncError as e:
        _fail(e)
    return CalibrateResponse(table=autotune.dumps_table(table), entries=len(table.entries))


def op_bench(req: BenchRequest) -> BenchResponse:
    try:
        with _machine_lock:
            report = bench.run_bench(
                req.algo, req.sparsity, req.rows, req.cols, req.hidden,
                table=_maybe_table(req.table), field_dim=req.field, fill=req.fill,
                runs=req.runs, iters=req.iters,
                no_fusion=req.no_fusion, no_hoist=req.no_hoist,
                force_b=req.force_b, force_t=req.force_t, seed=req.seed,
            )
    except SonncError as e:
        _fail(e)
    return BenchResponse(
        csv=report.to_csv(), reported_seconds=report.reported_seconds,
        block_size=report.block_size, threads=report.threads,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="sonnc", version=__version__)
    app.get("/version", response_model=VersionResponse)(op_version)
    app.post("/validate", response_model=ValidateResponse)(op_validate)
    app.post("/plan", response_model=PlanResponse)(op_plan)
    app.post("/run", response_model=RunResponse)(op_run)
    app.post("/calibrate", response_model=CalibrateResponse)(op_calibrate)
    app.post("/bench", response_model=BenchResponse)(op_bench)
    return app


app = create_app()
