"""Reference training applications, timing methodology, and ablations.

Four applications exercise the whole stack: a single-layer sigmoid
backprop net, an untied autoencoder, a mean-field CD-1 RBM, and the ISTA
sparse-coding update.  Each builder returns an ExecutionGraph plus the
initial values feeding it (data, weights, literal scalars).

The timing protocol runs each configuration `runs` times at a fixed
iteration count and reports the mean of the post-warmup runs; timing
covers only the convergence loop.  Ablation switches disable fusion or
hoisting, or force the (block size, threads) pair, and must never change
numerical results.
"""

from __future__ import annotations

import io
import csv as csv_mod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import passes
from .errors import GraphError, TableError
from .executor import RunResult, lower, make_decisions, run
from .graph import (
    Block,
    BlockList,
    Coord,
    Dense,
    ExecutionGraph,
    GraphBuilder,
    OpKind,
    Pattern,
    Role,
    Shape,
    VarKind,
)
from .autotune import Selection, TuneTable, collect_queries, forced_selection, select_params

DEFAULT_LR = 0.01
BENCH_TOL = 1e-300  # forces the full iteration budget


# ---------------------------------------------------------------------------
# patterns and synthetic data


def lrf_pattern(rows: int, cols: int, field_dim: int) -> BlockList:
    """Block-diagonal local receptive fields of size field_dim x field_dim."""
    count = min(rows, cols) // field_dim
    if count < 1:
        raise GraphError(f"field {field_dim} does not fit in {rows}x{cols}")
    return BlockList(tuple(Block(i * field_dim, i * field_dim, field_dim, field_dim) for i in range(count)))


def unstructured_pattern(rows: int, cols: int, fill: float, seed: int = 7) -> Coord:
    rng = np.random.default_rng(seed)
    nnz = max(1, int(round(rows * cols * fill)))
    flat = rng.choice(rows * cols, size=nnz, replace=False)
    flat.sort()
    coords = tuple((int(i // cols), int(i % cols)) for i in flat)
    return Coord(coords)


def make_pattern(sparsity: str, rows: int, cols: int, field_dim: int = 4, fill: float = 0.1) -> Pattern:
    if sparsity == "dense":
        return Dense()
    if sparsity == "lrf":
        return lrf_pattern(rows, cols, field_dim)
    if sparsity == "unstructured":
        return unstructured_pattern(rows, cols, fill)
    raise GraphError(f"unknown sparsity kind {sparsity!r}")


def _masked(rng: np.random.Generator, shape, pattern: Pattern) -> np.ndarray:
    arr = rng.uniform(-1.0, 1.0, shape)
    if not isinstance(pattern, Dense):
        arr = np.where(pattern.mask(Shape(*shape)), arr, 0.0)
    return arr


# ---------------------------------------------------------------------------
# application specs


@dataclass
class BackpropSpec:
    v_data: np.ndarray   # m x v input batch
    t_data: np.ndarray   # m x h targets
    w_data: np.ndarray   # v x h weights
    bias: np.ndarray     # 1 x h
    lr: float = DEFAULT_LR
    pattern: Pattern = Dense()
    tol: float = 1e-6
    max_iters: int = 100


@dataclass
class IstaSpec:
    x_data: np.ndarray   # m x v data
    w_data: np.ndarray   # v x h dictionary (reconstruction is Z . W^T)
    z0: np.ndarray       # m x h initial codes
    step_l: float        # gradient Lipschitz constant
    alpha: float         # sparsity weight
    tol: float = 1e-6
    max_iters: int = 100


@dataclass
class RbmSpec:
    v_data: np.ndarray   # m x v
    w_data: np.ndarray   # v x h
    h_bias: np.ndarray   # 1 x h
    v_bias: np.ndarray   # 1 x v
    lr: float = DEFAULT_LR
    pattern: Pattern = Dense()
    tol: float = 1e-6
    max_iters: int = 100


@dataclass
class AeSpec:
    v_data: np.ndarray    # m x v
    w_data: np.ndarray    # v x h encoder
    w2_data: np.ndarray   # h x v decoder (untied)
    h_bias: np.ndarray    # 1 x h
    v_bias: np.ndarray    # 1 x v
    lr: float = DEFAULT_LR
    pattern: Pattern = Dense()
    pattern2: Pattern = Dense()
    tol: float = 1e-6
    max_iters: int = 100


def _weight_var(b: GraphBuilder, name: str, shape: Shape, pattern: Pattern) -> str:
    if isinstance(pattern, Dense):
        return b.declare_var(VarKind.DENSE_MATRIX, shape, role=Role.STATE, name=name).id
    return b.declare_var(VarKind.SPARSE_MATRIX, shape, pattern=pattern, role=Role.STATE, name=name).id


# ---------------------------------------------------------------------------
# builders


def build_backprop(spec: BackpropSpec) -> tuple[ExecutionGraph, dict[str, np.ndarray]]:
    m, v = spec.v_data.shape
    h = spec.t_data.shape[1]
    b = GraphBuilder()
    V = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, v), name="V").id
    T = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, h), name="T").id
    W = _weight_var(b, "W", Shape(v, h), spec.pattern)
    bias = b.declare_var(VarKind.VECTOR, Shape(1, h), role=Role.STATE, name="bias").id
    lr = b.constant_scalar(spec.lr, name="lr").id
    one = b.constant_scalar(1.0, name="one").id

    n1 = b.add_node(OpKind.MATMUL, [V, W]).id
    n2 = b.add_node(OpKind.BIAS_ADD_ROW, [n1, bias]).id
    H = b.add_node(OpKind.SIGMOID, [n2]).id
    d1 = b.add_node(OpKind.SUB, [H, T]).id
    d2 = b.add_node(OpKind.MUL_ELEM, [d1, H]).id
    d3 = b.add_node(OpKind.SUB, [one, H]).id
    dH = b.add_node(OpKind.MUL_ELEM, [d2, d3]).id
    grad = b.add_node(OpKind.MASKED_MATMUL, [V, dH], mask=spec.pattern).id
    gscale = b.add_node(OpKind.SCALE_BY_SCALAR, [grad, lr]).id
    w_upd = b.add_node(OpKind.SUB, [W, gscale]).id
    bsum = b.add_node(OpKind.SUM_ROWS, [dH]).id
    bscale = b.add_node(OpKind.SCALE_BY_SCALAR, [bsum, lr]).id
    b_upd = b.add_node(OpKind.SUB, [bias, bscale]).id
    e1 = b.add_node(OpKind.SUB, [T, H]).id
    e2 = b.add_node(OpKind.SQUARE, [e1]).id
    e3 = b.add_node(OpKind.SUM_ALL, [e2]).id

    cost = b.declare_var(VarKind.SCALAR, Shape(1, 1), role=Role.DERIVED, name="cost").id
    b.bind_derived(cost, e3)
    b.bind_update(W, w_upd)
    b.bind_update(bias, b_upd)
    b.set_outputs([W, bias, cost])
    b.until_converged(cost, spec.tol, spec.max_iters)
    values = {
        V: spec.v_data,
        T: spec.t_data,
        W: spec.w_data,
        bias: spec.bias,
        lr: np.array([[spec.lr]]),
        one: np.array([[1.0]]),
    }
    return b.graph(), values


def build_ista(spec: IstaSpec) -> tuple[ExecutionGraph, dict[str, np.ndarray]]:
    m, v = spec.x_data.shape
    h = spec.z0.shape[1]
    if spec.w_data.shape != (v, h):
        raise GraphError(f"dictionary must be {v}x{h} so Z . W^T reconstructs the data")
    b = GraphBuilder()
    X = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, v), name="X").id
    W = b.declare_var(VarKind.DENSE_MATRIX, Shape(v, h), name="W").id
    Z = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, h), role=Role.STATE, name="Z").id
    inv_l = b.constant_scalar(1.0 / spec.step_l, name="inv_L").id
    half = b.constant_scalar(0.5, name="half").id
    alpha = b.constant_scalar(spec.alpha, name="alpha").id

    wt = b.add_node(OpKind.TRANSPOSE, [W]).id
    recon = b.add_node(OpKind.MATMUL, [Z, wt]).id          # Z W^T
    resid = b.add_node(OpKind.SUB, [recon, X]).id
    grad = b.add_node(OpKind.MATMUL, [resid, W]).id        # (Z W^T - X) W
    gstep = b.add_node(OpKind.SCALE_BY_SCALAR, [grad, inv_l]).id
    z_next = b.add_node(OpKind.SUB, [Z, gstep]).id
    z_shrunk = b.add_node(OpKind.SOFT_SHRINK, [z_next], theta=spec.alpha / spec.step_l).id

    sq = b.add_node(OpKind.SQUARE, [resid]).id
    ssq = b.add_node(OpKind.SUM_ALL, [sq]).id
    quad = b.add_node(OpKind.SCALE_BY_SCALAR, [ssq, half]).id
    az = b.add_node(OpKind.ABS, [Z]).id
    l1 = b.add_node(OpKind.SUM_ALL, [az]).id
    l1w = b.add_node(OpKind.SCALE_BY_SCALAR, [l1, alpha]).id
    obj = b.add_node(OpKind.ADD, [quad, l1w]).id

    cost = b.declare_var(VarKind.SCALAR, Shape(1, 1), role=Role.DERIVED, name="cost").id
    b.bind_derived(cost, obj)
    b.bind_update(Z, z_shrunk)
    b.set_outputs([Z, cost])
    b.until_converged(cost, spec.tol, spec.max_iters)
    values = {
        X: spec.x_data,
        W: spec.w_data,
        Z: spec.z0,
        inv_l: np.array([[1.0 / spec.step_l]]),
        half: np.array([[0.5]]),
        alpha: np.array([[spec.alpha]]),
    }
    return b.graph(), values


def build_rbm(spec: RbmSpec) -> tuple[ExecutionGraph, dict[str, np.ndarray]]:
    m, v = spec.v_data.shape
    h = spec.w_data.shape[1]
    b = GraphBuilder()
    V = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, v), name="V").id
    W = _weight_var(b, "W", Shape(v, h), spec.pattern)
    c = b.declare_var(VarKind.VECTOR, Shape(1, h), role=Role.STATE, name="c").id
    bv = b.declare_var(VarKind.VECTOR, Shape(1, v), role=Role.STATE, name="bv").id
    lr = b.constant_scalar(spec.lr, name="lr").id

    h0_pre = b.add_node(OpKind.MATMUL, [V, W]).id
    h0_b = b.add_node(OpKind.BIAS_ADD_ROW, [h0_pre, c]).id
    h0 = b.add_node(OpKind.SIGMOID, [h0_b]).id
    wt = b.add_node(OpKind.TRANSPOSE, [W]).id
    v1_pre = b.add_node(OpKind.MATMUL, [h0, wt]).id
    v1_b = b.add_node(OpKind.BIAS_ADD_ROW, [v1_pre, bv]).id
    v1 = b.add_node(OpKind.SIGMOID, [v1_b]).id
    h1_pre = b.add_node(OpKind.MATMUL, [v1, W]).id
    h1_b = b.add_node(OpKind.BIAS_ADD_ROW, [h1_pre, c]).id
    h1 = b.add_node(OpKind.SIGMOID, [h1_b]).id

    pos = b.add_node(OpKind.MASKED_MATMUL, [V, h0], mask=spec.pattern).id
    neg = b.add_node(OpKind.MASKED_MATMUL, [v1, h1], mask=spec.pattern).id
    dw = b.add_node(OpKind.SUB, [pos, neg]).id
    dws = b.add_node(OpKind.SCALE_BY_SCALAR, [dw, lr]).id
    w_upd = b.add_node(OpKind.ADD, [W, dws]).id

    dc = b.add_node(OpKind.SUB, [h0, h1]).id
    dcs = b.add_node(OpKind.SUM_ROWS, [dc]).id
    dcl = b.add_node(OpKind.SCALE_BY_SCALAR, [dcs, lr]).id
    c_upd = b.add_node(OpKind.ADD, [c, dcl]).id

    dv = b.add_node(OpKind.SUB, [V, v1]).id
    dvs = b.add_node(OpKind.SUM_ROWS, [dv]).id
    dvl = b.add_node(OpKind.SCALE_BY_SCALAR, [dvs, lr]).id
    bv_upd = b.add_node(OpKind.ADD, [bv, dvl]).id

    e1 = b.add_node(OpKind.SUB, [V, v1]).id
    e2 = b.add_node(OpKind.SQUARE, [e1]).id
    e3 = b.add_node(OpKind.SUM_ALL, [e2]).id

    cost = b.declare_var(VarKind.SCALAR, Shape(1, 1), role=Role.DERIVED, name="cost").id
    b.bind_derived(cost, e3)
    b.bind_update(W, w_upd)
    b.bind_update(c, c_upd)
    b.bind_update(bv, bv_upd)
    b.set_outputs([W, c, bv, cost])
    b.until_converged(cost, spec.tol, spec.max_iters)
    values = {
        V: spec.v_data,
        W: spec.w_data,
        c: spec.h_bias,
        bv: spec.v_bias,
        lr: np.array([[spec.lr]]),
    }
    return b.graph(), values


def build_ae(spec: AeSpec) -> tuple[ExecutionGraph, dict[str, np.ndarray]]:
    m, v = spec.v_data.shape
    h = spec.w_data.shape[1]
    b = GraphBuilder()
    V = b.declare_var(VarKind.DENSE_MATRIX, Shape(m, v), name="V").id
    W = _weight_var(b, "W", Shape(v, h), spec.pattern)
    W2 = _weight_var(b, "W2", Shape(h, v), spec.pattern2)
    c = b.declare_var(VarKind.VECTOR, Shape(1, h), role=Role.STATE, name="c").id
    bv = b.declare_var(VarKind.VECTOR, Shape(1, v), role=Role.STATE, name="bv").id
    lr = b.constant_scalar(spec.lr, name="lr").id
    one = b.constant_scalar(1.0, name="one").id

    h_pre = b.add_node(OpKind.MATMUL, [V, W]).id
    h_b = b.add_node(OpKind.BIAS_ADD_ROW, [h_pre, c]).id
    H = b.add_node(OpKind.SIGMOID, [h_b]).id
    r_pre = b.add_node(OpKind.MATMUL, [H, W2]).id
    r_b = b.add_node(OpKind.BIAS_ADD_ROW, [r_pre, bv]).id
    R = b.add_node(OpKind.SIGMOID, [r_b]).id

    s1 = b.add_node(OpKind.SUB, [R, V]).id
    s2 = b.add_node(OpKind.MUL_ELEM, [s1, R]).id
    s3 = b.add_node(OpKind.SUB, [one, R]).id
    dR = b.add_node(OpKind.MUL_ELEM, [s2, s3]).id

    w2t = b.add_node(OpKind.TRANSPOSE, [W2]).id
    back = b.add_node(OpKind.MATMUL, [dR, w2t]).id
    u2 = b.add_node(OpKind.MUL_ELEM, [back, H]).id
    u3 = b.add_node(OpKind.SUB, [one, H]).id
    dH = b.add_node(OpKind.MUL_ELEM, [u2, u3]).id

    g2 = b.add_node(OpKind.MASKED_MATMUL, [H, dR], mask=spec.pattern2).id
    g2s = b.add_node(OpKind.SCALE_BY_SCALAR, [g2, lr]).id
    w2_upd = b.add_node(OpKind.SUB, [W2, g2s]).id
    g1 = b.add_node(OpKind.MASKED_MATMUL, [V, dH], mask=spec.pattern).id
    g1s = b.add_node(OpKind.SCALE_BY_SCALAR, [g1, lr]).id
    w_upd = b.add_node(OpKind.SUB, [W, g1s]).id

    bvs = b.add_node(OpKind.SUM_ROWS, [dR]).id
    bvl = b.add_node(OpKind.SCALE_BY_SCALAR, [bvs, lr]).id
    bv_upd = b.add_node(OpKind.SUB, [bv, bvl]).id
    cs = b.add_node(OpKind.SUM_ROWS, [dH]).id
    cl = b.add_node(OpKind.SCALE_BY_SCALAR, [cs, lr]).id
    c_upd = b.add_node(OpKind.SUB, [c, cl]).id

    e1 = b.add_node(OpKind.SUB, [V, R]).id
    e2 = b.add_node(OpKind.SQUARE, [e1]).id
    e3 = b.add_node(OpKind.SUM_ALL, [e2]).id

    cost = b.declare_var(VarKind.SCALAR, Shape(1, 1), role=Role.DERIVED, name="cost").id
    b.bind_derived(cost, e3)
    b.bind_update(W, w_upd)
    b.bind_update(W2, w2_upd)
    b.bind_update(c, c_upd)
    b.bind_update(bv, bv_upd)
    b.set_outputs([W, W2, cost])
    b.until_converged(cost, spec.tol, spec.max_iters)
    values = {
        V: spec.v_data,
        W: spec.w_data,
        W2: spec.w2_data,
        c: spec.h_bias,
        bv: spec.v_bias,
        lr: np.array([[spec.lr]]),
        one: np.array([[1.0]]),
    }
    return b.graph(), values


# ---------------------------------------------------------------------------
# spec factories from sizes


def power_iteration_bound(w: np.ndarray, iters: int = 50, seed: int = 3) -> float:
    """1.1x the power-iteration estimate of the largest eigenvalue of W^T W."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, w.shape[1])
    gram = w.T @ w
    lam = 1.0
    for _ in range(iters):
        y = gram @ x
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 1.1
        x = y / lam
    return 1.1 * lam


def make_spec(algo: str, sparsity: str, rows: int, cols: int, hidden: int,
              field_dim: int = 4, fill: float = 0.1, iters: int = 100,
              lr: float = DEFAULT_LR, seed: int = 0, tol: float = BENCH_TOL):
    rng = np.random.default_rng(seed)
    if algo == "backprop":
        pat = make_pattern(sparsity, cols, hidden, field_dim, fill)
        return BackpropSpec(
            v_data=rng.uniform(-1, 1, (rows, cols)),
            t_data=rng.uniform(0.2, 0.8, (rows, hidden)),
            w_data=_masked(rng, (cols, hidden), pat),
            bias=rng.uniform(-0.1, 0.1, (1, hidden)),
            lr=lr, pattern=pat, tol=tol, max_iters=iters,
        )
    if algo == "ista":
        w = rng.uniform(-1, 1, (cols, hidden))
        return IstaSpec(
            x_data=rng.uniform(-1, 1, (rows, cols)),
            w_data=w,
            z0=np.zeros((rows, hidden)),
            step_l=power_iteration_bound(w),
            alpha=0.1,
            tol=tol, max_iters=iters,
        )
    if algo == "rbm":
        pat = make_pattern(sparsity, cols, hidden, field_dim, fill)
        return RbmSpec(
            v_data=rng.uniform(0, 1, (rows, cols)),
            w_data=_masked(rng, (cols, hidden), pat) * 0.1,
            h_bias=np.zeros((1, hidden)),
            v_bias=np.zeros((1, cols)),
            lr=lr, pattern=pat, tol=tol, max_iters=iters,
        )
    if algo == "ae":
        pat = make_pattern(sparsity, cols, hidden, field_dim, fill)
        pat2 = make_pattern(sparsity, hidden, cols, field_dim, fill)
        return AeSpec(
            v_data=rng.uniform(0, 1, (rows, cols)),
            w_data=_masked(rng, (cols, hidden), pat) * 0.1,
            w2_data=_masked(rng, (hidden, cols), pat2) * 0.1,
            h_bias=np.zeros((1, hidden)),
            v_bias=np.zeros((1, cols)),
            lr=lr, pattern=pat, pattern2=pat2, tol=tol, max_iters=iters,
        )
    raise GraphError(f"unknown algorithm {algo!r}")


def build(algo: str, spec) -> tuple[ExecutionGraph, dict[str, np.ndarray]]:
    return {
        "backprop": build_backprop,
        "ista": build_ista,
        "rbm": build_rbm,
        "ae": build_ae,
    }[algo](spec)


# ---------------------------------------------------------------------------
# timing protocol


@dataclass
class BenchReport:
    algo: str
    sparsity: str
    rows: int
    cols: int
    hidden: int
    field_dim: int
    runs: int
    iters: int
    per_run_seconds: list[float]
    warmup: int
    block_size: int
    threads: int
    formats: dict[str, str]
    no_fusion: bool = False
    no_hoist: bool = False
    last_result: Optional[RunResult] = None

    @property
    def reported_seconds(self) -> float:
        return float(np.mean(self.per_run_seconds[self.warmup:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv_mod.writer(buf)
        w.writerow(["algo", "sparsity", "rows", "cols", "hidden", "field", "run",
                    "seconds", "iterations", "b", "t", "no_fusion", "no_hoist"])
        for i, sec in enumerate(self.per_run_seconds):
            w.writerow([self.algo, self.sparsity, self.rows, self.cols, self.hidden,
                        self.field_dim, i + 1, repr(sec), self.iters, self.block_size,
                        self.threads, int(self.no_fusion), int(self.no_hoist)])
        w.writerow([self.algo, self.sparsity, self.rows, self.cols, self.hidden,
                    self.field_dim, "reported", repr(self.reported_seconds), self.iters,
                    self.block_size, self.threads, int(self.no_fusion), int(self.no_hoist)])
        return buf.getvalue()


def run_bench(
    algo: str,
    sparsity: str,
    rows: int,
    cols: int,
    hidden: int,
    table: Optional[TuneTable],
    field_dim: int = 4,
    fill: float = 0.1,
    runs: int = 10,
    iters: int = 100,
    no_fusion: bool = False,
    no_hoist: bool = False,
    force_b: Optional[int] = None,
    force_t: Optional[int] = None,
    seed: int = 0,
) -> BenchReport:
    """Execute the repeated-runs protocol and assemble the report.

    A configuration is compiled once; every run replays the same initial
    values so only caching and scheduling noise differ between runs.
    """
    spec = make_spec(algo, sparsity, rows, cols, hidden, field_dim, fill, iters, seed=seed)
    g, values = build(algo, spec)
    g_opt, _reports = passes.run_pipeline(g, no_fusion=no_fusion, no_hoist=no_hoist)
    if force_b is not None and force_t is not None:
        selection = forced_selection(force_b, force_t)
    else:
        if table is None:
            raise TableError("a calibrated tune table is required (or force b and t)")
        queries = collect_queries(g_opt)
        selection = select_params(table, queries)
    decisions = make_decisions(g_opt, selection.block_size)
    plan = lower(g_opt, decisions, selection)

    per_run: list[float] = []
    last: Optional[RunResult] = None
    for _ in range(max(1, runs)):
        result = run(plan, initial_values={k: np.array(v) for k, v in values.items()})
        per_run.append(result.loop_seconds)
        last = result
    warmup = min(5, len(per_run) - 1)
    return BenchReport(
        algo=algo, sparsity=sparsity, rows=rows, cols=cols, hidden=hidden,
        field_dim=field_dim, runs=len(per_run), iters=iters,
        per_run_seconds=per_run, warmup=warmup,
        block_size=plan.block_size, threads=plan.threads,
        formats={vid: plan.decisions[vid].format.value for vid in g_opt.vars},
        no_fusion=no_fusion, no_hoist=no_hoist, last_result=last,
    )
