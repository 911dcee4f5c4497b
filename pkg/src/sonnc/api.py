"""Embedding interface: compile and run graph documents.

This is the surface the service, the CLI, and scripting frontends share.
Everything routes through `compile_plan` / `run_document`, so any two
clients given the same document, table, and seed produce byte-identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autotune, executor, graphdoc, passes
from .autotune import Selection, TuneTable
from .errors import TableError
from .executor import Plan, RunResult
from .graph import ExecutionGraph
from .passes import PassReport

DEFAULT_SEED = 0


@dataclass
class Compiled:
    graph: ExecutionGraph          # optimized
    plan: Plan
    reports: list[PassReport]
    selection: Selection


def compile_plan(
    g: ExecutionGraph,
    table: Optional[TuneTable] = None,
    no_fusion: bool = False,
    no_hoist: bool = False,
    force_b: Optional[int] = None,
    force_t: Optional[int] = None,
    threads_override: Optional[int] = None,
) -> Compiled:
    g_opt, reports = passes.run_pipeline(g, no_fusion=no_fusion, no_hoist=no_hoist)
    if force_b is not None or force_t is not None:
        if force_b is None or force_t is None:
            raise TableError("force_b and force_t must be given together")
        selection = autotune.forced_selection(force_b, force_t)
    else:
        if table is None:
            raise TableError("a calibrated tune table is required (or force b and t)")
        queries = autotune.collect_queries(g_opt)
        if queries:
            selection = autotune.select_params(table, queries)
        else:
            # no matmul work to tune against: take a mid-grid block, one thread
            b = min(table.b_axis, key=lambda x: abs(x - 64))
            selection = Selection(block_size=b, threads=table.t_axis[0],
                                  predicted_seconds=0.0, clamped=False)
    if threads_override is not None:
        t = max(1, min(int(threads_override), max(selection.threads, *(
            table.t_axis if table is not None else (threads_override,)
        ))))
        selection = Selection(selection.block_size, t, selection.predicted_seconds, selection.clamped)
    decisions = executor.make_decisions(g_opt, selection.block_size)
    plan = executor.lower(g_opt, decisions, selection)
    return Compiled(graph=g_opt, plan=plan, reports=reports, selection=selection)


def plan_dump_text(compiled: Compiled) -> str:
    lines = []
    for report in compiled.reports:
        lines.extend(report.dump_lines())
    lines.extend(compiled.plan.dump_lines())
    return "\n".join(lines) + "\n"


def result_payload(result: RunResult, selection: Selection) -> dict:
    return {
        "iterations": result.iterations,
        "final_cost": result.final_cost,
        "stop_reason": result.stop_reason,
        "cost_history": result.cost_history,
        "selection": {"b": selection.block_size, "t": selection.threads},
        "outputs": {
            k: [[float(x) for x in row] for row in v] for k, v in result.outputs.items()
        },
    }


def run_document(
    doc: dict,
    table: Optional[TuneTable] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    force_b: Optional[int] = None,
    force_t: Optional[int] = None,
    no_fusion: bool = False,
    no_hoist: bool = False,
) -> dict:
    """Parse, compile, and run a graph document; returns a JSON-able payload.

    Vars carrying an `init` payload use it; everything else draws from the
    seeded generator (seed defaults to 0 so runs are deterministic).
    """
    g = graphdoc.parse_document(doc)
    inits = graphdoc.document_initial_values(doc, g)
    compiled = compile_plan(
        g, table=table, no_fusion=no_fusion, no_hoist=no_hoist,
        force_b=force_b, force_t=force_t, threads_override=threads,
    )
    result = executor.run(
        compiled.plan,
        initial_values=inits,
        seed=DEFAULT_SEED if seed is None else int(seed),
    )
    return result_payload(result, compiled.selection)
