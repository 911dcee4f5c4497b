"""Plan lowering and execution.

`lower` turns an optimized graph plus storage decisions and a parameter
selection into a Plan: kernel tasks grouped into barrier-separated
phases, statically round-robin-assigned to a fixed pool of workers.
`run` executes the preamble once, then the convergence loop with
double-buffered state.  `run_reference` is the independent oracle: it
interprets the graph directly on dense arrays, single-threaded, with its
own elementary implementations.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ExecutionError, GraphError
from .graph import (
    ChainStep,
    Dense,
    ExecutionGraph,
    OpKind,
    Pattern,
    Role,
    Shape,
    VarKind,
    infer_node_pattern,
    should_stop,
)
from .kernels import KernelTask
from .storage import (
    Format,
    Layout,
    PackedMatrix,
    StorageDecision,
    alloc_packed,
    choose_format,
    pack,
    unpack,
)


@dataclass
class Phase:
    tasks: list[KernelTask]
    worker_tasks: list[list[KernelTask]]


@dataclass
class Plan:
    graph: ExecutionGraph
    decisions: dict[str, StorageDecision]
    block_size: int
    threads: int
    preamble_phases: list[Phase]
    body_phases: list[Phase]
    predicted_seconds: Optional[float] = None

    def node_task_counts(self) -> dict[str, int]:
        """Tasks per node in one full pass (preamble nodes count their
        single execution; body nodes count one iteration)."""
        out: dict[str, int] = {}
        for ph in self.preamble_phases + self.body_phases:
            for task in ph.tasks:
                out[task.node_id] = out.get(task.node_id, 0) + 1
        return out

    def dump_lines(self) -> list[str]:
        lines = []
        for vid in self.graph.vars:
            lines.append(self.decisions[vid].dump_line())
        pred = self.predicted_seconds
        has_pred = pred is not None and pred == pred  # forced selections carry NaN
        lines.append(
            f"selection b={self.block_size} t={self.threads}"
            + (f" predicted={pred:.6g}" if has_pred else "")
        )
        for label, phases in (("preamble", self.preamble_phases), ("body", self.body_phases)):
            for i, ph in enumerate(phases):
                nodes = sorted({t.node_id for t in ph.tasks})
                lines.append(f"phase {label}[{i}] tasks={len(ph.tasks)} nodes={','.join(nodes)}")
        return lines


@dataclass
class RunResult:
    iterations: int
    final_cost: float
    stop_reason: str  # "converged" | "max_iters"
    outputs: dict[str, np.ndarray]
    cost_history: list[float] = field(default_factory=list)
    loop_seconds: float = 0.0
    kernel_counts: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# storage decisions


def right_operand_layouts(g: ExecutionGraph) -> dict[str, Layout]:
    """Column-major for values consumed chiefly as the right operand of a
    matmul-family op; row-major otherwise."""
    right = {vid: 0 for vid in list(g.vars) + list(g.nodes)}
    other = dict(right)
    right_kinds = (OpKind.MATMUL, OpKind.TRANSPOSE_MATMUL_LEFT,
                   OpKind.MASKED_MATMUL, OpKind.MULT_BIAS_SIGM)
    for n in g.nodes.values():
        for pos, i in enumerate(n.inputs):
            if i not in right:
                continue
            if n.kind in right_kinds and pos == 1:
                right[i] += 1
            else:
                other[i] += 1
    return {
        vid: Layout.COL_MAJOR if right[vid] > other[vid] else Layout.ROW_MAJOR
        for vid in right
    }


def make_decisions(g: ExecutionGraph, block_size: int) -> dict[str, StorageDecision]:
    """Choose a physical format for every variable and node output.

    The format follows the declared (or inferred) sparsity pattern; the
    block size is global to the plan; the layout follows the neighbor rule.
    An update-producing node always adopts its state var's decision so the
    between-iteration buffer swap is transparent.
    """
    layouts = right_operand_layouts(g)
    out: dict[str, StorageDecision] = {}
    for v in g.vars.values():
        pattern = v.pattern if v.pattern is not None else Dense()
        fmt = choose_format(pattern, v.shape)
        out[v.id] = StorageDecision(v.id, fmt, block_size, layouts[v.id])
    producer_of = {nid: var for var, nid in g.updates.items()}
    for n in g.nodes.values():
        if n.id in producer_of:
            src = out[producer_of[n.id]]
            out[n.id] = StorageDecision(n.id, src.format, src.block_size, src.layout)
            continue
        pattern = infer_node_pattern(g, n)
        fmt = choose_format(pattern, n.out_shape)
        out[n.id] = StorageDecision(n.id, fmt, block_size, layouts[n.id])
    return out


def value_patterns(g: ExecutionGraph) -> dict[str, Pattern]:
    pats: dict[str, Pattern] = {}
    for v in g.vars.values():
        pats[v.id] = v.pattern if v.pattern is not None else Dense()
    producer_of = {nid: var for var, nid in g.updates.items()}
    for n in g.nodes.values():
        if n.id in producer_of:
            pats[n.id] = pats[producer_of[n.id]]
        else:
            pats[n.id] = infer_node_pattern(g, n)
    return pats


# ---------------------------------------------------------------------------
# lowering


def _node_tasks(g: ExecutionGraph, n, buf_proto: PackedMatrix) -> list[KernelTask]:
    common = dict(node_id=n.id, kind=n.kind, input_ids=n.inputs, out_id=n.id,
                  theta=n.theta, program=n.program)
    if n.kind is OpKind.SUM_ALL or n.kind is OpKind.SUB_SQ_SUM:
        return [KernelTask(key=None, **common)]
    fmt = buf_proto.decision.format
    if n.kind is OpKind.SUM_ROWS:
        _, nbc = buf_proto.grid()
        return [KernelTask(key=(0, bj), **common) for bj in range(nbc)]
    if fmt is Format.DENSE_BLOCKED:
        nbr, nbc = buf_proto.grid()
        return [KernelTask(key=(bi, bj), **common) for bi in range(nbr) for bj in range(nbc)]
    if fmt is Format.LOCALLY_DENSE:
        return [KernelTask(key=i, **common) for i in range(len(buf_proto.fields))]
    return [KernelTask(key=k, **common) for k in sorted(buf_proto.blocks)]


def lower(g: ExecutionGraph, decisions: dict[str, StorageDecision], selection) -> Plan:
    """Split nodes into per-block tasks and group them into greedy minimal
    phases that respect the topological order."""
    if selection is None:
        raise ExecutionError("parameter selection required for lowering")
    for vid in list(g.vars) + list(g.nodes):
        if vid not in decisions:
            raise ExecutionError(f"no storage decision for {vid!r}")
    b = int(selection.block_size)
    t = int(selection.threads)
    if t < 1:
        raise ExecutionError(f"thread count must be >= 1, got {t}")

    pats = value_patterns(g)
    protos = {
        nid: alloc_packed(g.nodes[nid].out_shape, pats[nid], decisions[nid])
        for nid in g.nodes
    }

    def build_phases(ids: list[str], in_preamble: bool) -> list[Phase]:
        level: dict[str, int] = {}
        for nid in g.topo_order(ids):
            n = g.nodes[nid]
            lv = 0
            for i in n.inputs:
                if i in level:
                    lv = max(lv, level[i] + 1)
                elif i in g.nodes and not in_preamble and i not in g.preamble:
                    raise GraphError(f"body node {nid} precedes its input {i}")
            level[nid] = lv
        phases: list[Phase] = []
        if not level:
            return phases
        for lv in range(max(level.values()) + 1):
            tasks: list[KernelTask] = []
            for nid in g.topo_order(ids):
                if level[nid] == lv:
                    tasks.extend(_node_tasks(g, g.nodes[nid], protos[nid]))
            seen = set()
            for task in tasks:
                sig = (task.out_id, task.key)
                if sig in seen:
                    raise ExecutionError(f"phase collision on {sig}")
                seen.add(sig)
            worker_tasks = [tasks[w::t] for w in range(t)]
            phases.append(Phase(tasks, worker_tasks))
        return phases

    body_ids = [nid for nid in g.nodes if nid not in g.preamble]
    pre_ids = [nid for nid in g.nodes if nid in g.preamble]
    return Plan(
        graph=g,
        decisions=decisions,
        block_size=b,
        threads=t,
        preamble_phases=build_phases(pre_ids, True),
        body_phases=build_phases(body_ids, False),
        predicted_seconds=getattr(selection, "predicted_seconds", None),
    )


# ---------------------------------------------------------------------------
# worker pool (static assignment, full-phase barrier)


class _Pool:
    def __init__(self, t: int):
        self.t = t
        self._threads: list[threading.Thread] = []
        if t > 1:
            self._start = threading.Barrier(t + 1)
            self._done = threading.Barrier(t + 1)
            self._tasks: list[list[KernelTask]] = [[] for _ in range(t)]
            self._buffers: dict[str, PackedMatrix] = {}
            self._errors: list[BaseException] = []
            self._shutdown = False
            for w in range(t):
                th = threading.Thread(target=self._worker, args=(w,), daemon=True)
                th.start()
                self._threads.append(th)

    def _worker(self, w: int):
        while True:
            self._start.wait()
            if self._shutdown:
                return
            try:
                for task in self._tasks[w]:
                    kernels.execute(task, self._buffers)
            except BaseException as e:  # propagate to the main thread
                self._errors.append(e)
            self._done.wait()

    def run_phase(self, phase: Phase, buffers: dict[str, PackedMatrix],
                  counts: Optional[dict[str, int]] = None):
        if counts is not None:
            for task in phase.tasks:
                counts[task.node_id] = counts.get(task.node_id, 0) + 1
        if self.t == 1:
            for task in phase.tasks:
                kernels.execute(task, buffers)
            return
        self._tasks = phase.worker_tasks
        self._buffers = buffers
        self._errors = []
        self._start.wait()
        self._done.wait()
        if self._errors:
            raise self._errors[0]

    def close(self):
        if self.t > 1 and self._threads:
            self._shutdown = True
            self._start.wait()
            self._threads = []


# ---------------------------------------------------------------------------
# initial values


def seed_initial_values(g: ExecutionGraph, seed: int,
                        given: Optional[dict[str, np.ndarray]] = None) -> dict[str, np.ndarray]:
    """Uniform(-1, 1) values for every Constant/State var not supplied.

    Declaration order drives RNG consumption, so a graph serialized and
    reloaded reproduces identical values for the same seed.
    """
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for v in g.vars.values():
        if v.role is Role.DERIVED:
            continue
        if given is not None and v.id in given:
            values[v.id] = np.asarray(given[v.id], dtype=np.float64).reshape(v.shape.rows, v.shape.cols)
            continue
        arr = rng.uniform(-1.0, 1.0, size=(v.shape.rows, v.shape.cols))
        if v.pattern is not None:
            arr = np.where(v.pattern.mask(v.shape), arr, 0.0)
        values[v.id] = arr
    return values


def _check_initial(g: ExecutionGraph, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for v in g.vars.values():
        if v.role is Role.DERIVED:
            continue
        if v.id not in values:
            raise ExecutionError(f"missing initial value for {v.id!r} (pass a value or a seed)")
        arr = np.asarray(values[v.id], dtype=np.float64)
        if arr.ndim != 2 or arr.shape != (v.shape.rows, v.shape.cols):
            raise ExecutionError(f"initial value for {v.id!r} has shape {arr.shape}, want {v.shape}")
        out[v.id] = arr
    return out


# ---------------------------------------------------------------------------
# execution


def run(
    plan: Plan,
    initial_values: Optional[dict[str, np.ndarray]] = None,
    seed: Optional[int] = None,
    collect_counts: bool = False,
) -> RunResult:
    g = plan.graph
    if g.convergence is None:
        raise ExecutionError("graph has no convergence spec")
    if seed is not None:
        initial_values = seed_initial_values(g, seed, initial_values)
    values = _check_initial(g, initial_values or {})

    pats = value_patterns(g)
    buffers: dict[str, PackedMatrix] = {}
    for v in g.vars.values():
        if v.role is Role.DERIVED:
            continue
        buffers[v.id] = pack(values[v.id], pats[v.id], plan.decisions[v.id])
    for nid, n in g.nodes.items():
        buffers[nid] = alloc_packed(n.out_shape, pats[nid], plan.decisions[nid])

    counts: Optional[dict[str, int]] = {} if collect_counts else None
    cost_node = g.bindings[g.convergence.cost_var]
    tol, max_iters = g.convergence.tol, g.convergence.max_iters

    pool = _Pool(plan.threads)
    try:
        for phase in plan.preamble_phases:
            pool.run_phase(phase, buffers, counts)
        history: list[float] = []
        stop_reason = "max_iters"
        prev_cost = None
        t0 = time.perf_counter()
        iterations = 0
        for it in range(max_iters):
            for phase in plan.body_phases:
                pool.run_phase(phase, buffers, counts)
            cost = kernels.scalar_value(buffers[cost_node])
            if not np.isfinite(cost):
                raise ExecutionError(f"non-finite cost at iteration {it}")
            history.append(cost)
            iterations = it + 1
            # state updates apply between iterations (double-buffer swap)
            for var, nid in g.updates.items():
                buffers[var], buffers[nid] = buffers[nid], buffers[var]
            if prev_cost is not None and should_stop(prev_cost, cost, tol):
                stop_reason = "converged"
                break
            prev_cost = cost
        loop_seconds = time.perf_counter() - t0
    finally:
        pool.close()

    outputs = {}
    for o in g.outputs:
        decl = g.vars[o]
        if decl.role is Role.DERIVED:
            outputs[o] = unpack(buffers[g.bindings[o]])
        else:
            outputs[o] = unpack(buffers[o])
    return RunResult(
        iterations=iterations,
        final_cost=history[-1] if history else float("nan"),
        stop_reason=stop_reason,
        outputs=outputs,
        cost_history=history,
        loop_seconds=loop_seconds,
        kernel_counts=counts or {},
    )


# ---------------------------------------------------------------------------
# reference interpreter (the oracle: unoptimized graph, dense math)


def _ref_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _ref_eval(g: ExecutionGraph, n, vals: dict[str, np.ndarray]) -> np.ndarray:
    ins = [vals[i] for i in n.inputs]
    k = n.kind
    if k is OpKind.MATMUL:
        return ins[0] @ ins[1]
    if k is OpKind.TRANSPOSE_MATMUL_LEFT:
        return ins[0].T @ ins[1]
    if k is OpKind.MATMUL_TRANSPOSE_RIGHT:
        return ins[0] @ ins[1].T
    if k is OpKind.TRANSPOSE:
        return ins[0].T.copy()
    if k is OpKind.ADD:
        return ins[0] + ins[1]
    if k is OpKind.SUB:
        return ins[0] - ins[1]
    if k is OpKind.MUL_ELEM:
        return ins[0] * ins[1]
    if k is OpKind.BIAS_ADD_ROW:
        return ins[0] + ins[1]
    if k is OpKind.SIGMOID:
        return _ref_sigmoid(ins[0])
    if k is OpKind.SOFT_SHRINK:
        return np.sign(ins[0]) * np.maximum(np.abs(ins[0]) - n.theta, 0.0)
    if k is OpKind.ABS:
        return np.abs(ins[0])
    if k is OpKind.SCALE_BY_SCALAR:
        return ins[0] * ins[1][0, 0]
    if k is OpKind.SUM_ROWS:
        return ins[0].sum(axis=0, keepdims=True)
    if k is OpKind.SUM_ALL:
        return np.array([[ins[0].sum()]])
    if k is OpKind.SQUARE:
        return ins[0] * ins[0]
    if k is OpKind.MASKED_MATMUL:
        full = ins[0].T @ ins[1]
        return np.where(n.mask.mask(n.out_shape), full, 0.0)
    if k is OpKind.MULT_BIAS_SIGM:
        return _ref_sigmoid(ins[0] @ ins[1] + ins[2])
    if k is OpKind.SUB_SQ_SUM:
        d = ins[0] - ins[1]
        return np.array([[(d * d).sum()]])
    if k is OpKind.ELEM_CHAIN:
        temps: list[np.ndarray] = []
        for step in n.program:
            args = [ins[i] if src == "in" else temps[i] for (src, i) in step.args]
            args = [a[0, 0] if isinstance(a, np.ndarray) and a.shape == (1, 1) and not n.out_shape.is_scalar else a
                    for a in args]
            if step.kind is OpKind.ADD:
                r = args[0] + args[1]
            elif step.kind is OpKind.SUB:
                r = args[0] - args[1]
            elif step.kind in (OpKind.MUL_ELEM, OpKind.SCALE_BY_SCALAR):
                r = args[0] * args[1]
            elif step.kind is OpKind.SQUARE:
                r = args[0] * args[0]
            elif step.kind is OpKind.ABS:
                r = np.abs(args[0])
            elif step.kind is OpKind.SIGMOID:
                r = _ref_sigmoid(args[0])
            elif step.kind is OpKind.SOFT_SHRINK:
                r = np.sign(args[0]) * np.maximum(np.abs(args[0]) - step.theta, 0.0)
            else:
                raise ExecutionError(f"bad chain step {step.kind}")
            temps.append(np.asarray(r, dtype=np.float64))
        out = temps[-1]
        return out.reshape(n.out_shape.rows, n.out_shape.cols) if out.ndim != 2 else out
    raise ExecutionError(f"reference cannot evaluate {k}")


def run_reference(
    g: ExecutionGraph,
    initial_values: Optional[dict[str, np.ndarray]] = None,
    seed: Optional[int] = None,
) -> RunResult:
    if g.convergence is None:
        raise ExecutionError("graph has no convergence spec")
    if seed is not None:
        initial_values = seed_initial_values(g, seed, initial_values)
    values = dict(_check_initial(g, initial_values or {}))
    for v in g.vars.values():
        if v.pattern is not None and v.id in values:
            values[v.id] = np.where(v.pattern.mask(v.shape), values[v.id], 0.0)

    order = g.topo_order()
    pre = [nid for nid in order if nid in g.preamble]
    body = [nid for nid in order if nid not in g.preamble]
    for nid in pre:
        values[nid] = _ref_eval(g, g.nodes[nid], values)

    cost_node = g.bindings[g.convergence.cost_var]
    tol, max_iters = g.convergence.tol, g.convergence.max_iters
    history: list[float] = []
    stop_reason = "max_iters"
    prev_cost = None
    t0 = time.perf_counter()
    iterations = 0
    for it in range(max_iters):
        for nid in body:
            values[nid] = _ref_eval(g, g.nodes[nid], values)
        cost = float(values[cost_node][0, 0])
        if not np.isfinite(cost):
            raise ExecutionError(f"non-finite cost at iteration {it}")
        history.append(cost)
        iterations = it + 1
        for var, nid in g.updates.items():
            values[var] = values[nid]
        if prev_cost is not None and should_stop(prev_cost, cost, tol):
            stop_reason = "converged"
            break
        prev_cost = cost
    loop_seconds = time.perf_counter() - t0

    outputs = {}
    for o in g.outputs:
        decl = g.vars[o]
        src = values[g.bindings[o]] if decl.role is Role.DERIVED else values[o]
        outputs[o] = np.array(src, dtype=np.float64)
    return RunResult(
        iterations=iterations,
        final_cost=history[-1] if history else float("nan"),
        stop_reason=stop_reason,
        outputs=outputs,
        cost_history=history,
        loop_seconds=loop_seconds,
    )
