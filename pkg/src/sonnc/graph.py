"""Execution-graph IR and the builder API.

Applications declare variables, connect them through operations, bind
state updates and a convergence criterion, and obtain an immutable
:class:`ExecutionGraph` that the optimizer and executor consume.

The IR is deliberately small: two matrix kinds (dense / fixed-pattern
sparse), vectors and scalars, and the operation vocabulary needed by
sigmoid-unit training loops and ISTA-style solvers.  Sparsity structure
is fixed at declaration time and never changes afterwards.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Union

import numpy as np

from .errors import GraphError, PatternError, ShapeError

EPS_NORMALIZE = 1e-12  # guard for the relative-change stopping rule


class VarKind(str, Enum):
    DENSE_MATRIX = "DenseMatrix"
    SPARSE_MATRIX = "SparseMatrix"
    VECTOR = "Vector"
    SCALAR = "Scalar"


class Role(str, Enum):
    CONSTANT = "Constant"
    STATE = "State"
    DERIVED = "Derived"


class OpKind(str, Enum):
    MATMUL = "MatMul"
    TRANSPOSE_MATMUL_LEFT = "TransposeMatMulLeft"    # A^T @ B
    MATMUL_TRANSPOSE_RIGHT = "MatMulTransposeRight"  # A @ B^T, installed by rewrite
    TRANSPOSE = "Transpose"
    ADD = "Add"
    SUB = "Sub"
    MUL_ELEM = "MulElem"
    BIAS_ADD_ROW = "BiasAddRow"
    SIGMOID = "Sigmoid"
    SOFT_SHRINK = "SoftShrink"
    ABS = "Abs"
    SCALE_BY_SCALAR = "ScaleByScalar"
    SUM_ROWS = "SumRows"
    SUM_ALL = "SumAll"
    SQUARE = "Square"
    MASKED_MATMUL = "MaskedMatMul"
    # fused kinds, installed by the optimizer only
    MULT_BIAS_SIGM = "MultBiasSigm"
    ELEM_CHAIN = "ElemChain"
    SUB_SQ_SUM = "SubSqSum"


#: kinds a builder / JSON document may contain (fused kinds are compiler-internal)
BUILDER_OP_KINDS = frozenset(k for k in OpKind) - {
    OpKind.MULT_BIAS_SIGM,
    OpKind.ELEM_CHAIN,
    OpKind.SUB_SQ_SUM,
    OpKind.MATMUL_TRANSPOSE_RIGHT,
}

#: elementwise kinds eligible for chain fusion
ELEMWISE_KINDS = frozenset(
    {
        OpKind.ADD,
        OpKind.SUB,
        OpKind.MUL_ELEM,
        OpKind.SQUARE,
        OpKind.SIGMOID,
        OpKind.SOFT_SHRINK,
        OpKind.SCALE_BY_SCALAR,
        OpKind.ABS,
    }
)

#: matmul family (for autotune queries and layout decisions)
MATMUL_KINDS = frozenset(
    {
        OpKind.MATMUL,
        OpKind.TRANSPOSE_MATMUL_LEFT,
        OpKind.MATMUL_TRANSPOSE_RIGHT,
        OpKind.MASKED_MATMUL,
        OpKind.MULT_BIAS_SIGM,
    }
)


@dataclass(frozen=True)
class Shape:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"shape must be >= 1x1, got {self.rows}x{self.cols}")

    @property
    def is_scalar(self) -> bool:
        return self.rows == 1 and self.cols == 1

    def __str__(self):
        return f"{self.rows}x{self.cols}"


# ---------------------------------------------------------------------------
# sparsity patterns


@dataclass(frozen=True)
class Block:
    row0: int
    col0: int
    height: int
    width: int

    def overlaps(self, other: "Block") -> bool:
        return (
            self.row0 < other.row0 + other.height
            and other.row0 < self.row0 + self.height
            and self.col0 < other.col0 + other.width
            and other.col0 < self.col0 + self.width
        )


@dataclass(frozen=True)
class Dense:
    def validate(self, shape: Shape) -> None:
        pass

    def mask(self, shape: Shape) -> np.ndarray:
        return np.ones((shape.rows, shape.cols), dtype=bool)


@dataclass(frozen=True)
class BlockList:
    blocks: tuple[Block, ...]

    def validate(self, shape: Shape) -> None:
        for b in self.blocks:
            if b.height < 1 or b.width < 1:
                raise PatternError(f"degenerate block {b}")
            if b.row0 < 0 or b.col0 < 0 or b.row0 + b.height > shape.rows or b.col0 + b.width > shape.cols:
                raise PatternError(f"block {b} exceeds shape {shape}")
        for a, b in itertools.combinations(self.blocks, 2):
            if a.overlaps(b):
                raise PatternError(f"blocks {a} and {b} overlap")

    def mask(self, shape: Shape) -> np.ndarray:
        m = np.zeros((shape.rows, shape.cols), dtype=bool)
        for b in self.blocks:
            m[b.row0 : b.row0 + b.height, b.col0 : b.col0 + b.width] = True
        return m

    def min_field_dim(self) -> int:
        return min(min(b.height, b.width) for b in self.blocks) if self.blocks else 0


@dataclass(frozen=True)
class Coord:
    coords: tuple[tuple[int, int], ...]

    def validate(self, shape: Shape) -> None:
        prev = None
        for rc in self.coords:
            r, c = rc
            if not (0 <= r < shape.rows and 0 <= c < shape.cols):
                raise PatternError(f"coordinate {rc} exceeds shape {shape}")
            if prev is not None and not (prev < rc):
                raise PatternError(f"coordinates not strictly sorted at {rc}")
            prev = rc

    def mask(self, shape: Shape) -> np.ndarray:
        m = np.zeros((shape.rows, shape.cols), dtype=bool)
        if self.coords:
            rr, cc = zip(*self.coords)
            m[list(rr), list(cc)] = True
        return m

    def fill(self, shape: Shape) -> float:
        return len(self.coords) / float(shape.rows * shape.cols)


Pattern = Union[Dense, BlockList, Coord]


def pattern_is_subset(inner: Pattern, outer: Pattern, shape: Shape) -> bool:
    """True when every structurally-nonzero position of `inner` is in `outer`."""
    if isinstance(outer, Dense):
        return True
    if isinstance(inner, Dense):
        return bool(outer.mask(shape).all())
    return bool((inner.mask(shape) & ~outer.mask(shape)).sum() == 0)


def pattern_union(a: Pattern, b: Pattern, shape: Shape) -> Pattern:
    if isinstance(a, Dense) or isinstance(b, Dense):
        return Dense()
    if a == b:
        return a
    m = a.mask(shape) | b.mask(shape)
    coords = tuple(map(tuple, np.argwhere(m)))
    return Coord(coords)


# ---------------------------------------------------------------------------
# declarations and nodes


@dataclass(frozen=True)
class VarDecl:
    id: str
    kind: VarKind
    shape: Shape
    role: Role
    pattern: Optional[Pattern] = None  # SparseMatrix only


@dataclass(frozen=True)
class ChainStep:
    """One step of a fused elementwise program.

    `args` are ("in", i) references to fused-node inputs or ("tmp", j)
    references to earlier steps.
    """

    kind: OpKind
    args: tuple[tuple[str, int], ...]
    theta: Optional[float] = None


@dataclass
class OpNode:
    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    out_shape: Shape
    theta: Optional[float] = None          # SoftShrink
    mask: Optional[Pattern] = None         # MaskedMatMul / fused sparse chains
    program: Optional[tuple[ChainStep, ...]] = None  # ElemChain


@dataclass(frozen=True)
class ConvergenceSpec:
    cost_var: str
    tol: float
    max_iters: int


@dataclass
class ExecutionGraph:
    """Dataflow IR for one training iteration plus its loop specification.

    `updates` maps each State variable to the node producing its next
    value; updates apply between iterations (reads within an iteration
    see the pre-iteration state).  `bindings` names node results as
    Derived variables.  `preamble` is filled by the optimizer with nodes
    hoisted out of the loop.
    """

    vars: dict[str, VarDecl] = field(default_factory=dict)
    nodes: dict[str, OpNode] = field(default_factory=dict)
    updates: dict[str, str] = field(default_factory=dict)
    bindings: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    convergence: Optional[ConvergenceSpec] = None
    preamble: set[str] = field(default_factory=set)

    def clone(self) -> "ExecutionGraph":
        return ExecutionGraph(
            vars=dict(self.vars),
            nodes={k: replace(n) for k, n in self.nodes.items()},
            updates=dict(self.updates),
            bindings=dict(self.bindings),
            outputs=list(self.outputs),
            convergence=self.convergence,
            preamble=set(self.preamble),
        )

    # -- structural queries -------------------------------------------------

    def value_shape(self, vid: str) -> Shape:
        if vid in self.vars:
            return self.vars[vid].shape
        if vid in self.nodes:
            return self.nodes[vid].out_shape
        raise GraphError(f"unknown id {vid!r}")

    def value_pattern(self, vid: str) -> Pattern:
        """Effective sparsity of a value; Dense when nothing tighter is provable."""
        if vid in self.vars:
            v = self.vars[vid]
            return v.pattern if v.pattern is not None else Dense()
        return infer_node_pattern(self, self.nodes[vid])

    def consumers(self) -> dict[str, list[str]]:
        """Node id -> ids of nodes consuming it (bindings/updates excluded)."""
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for i in n.inputs:
                if i in out:
                    out[i].append(n.id)
        return out

    def use_counts(self) -> dict[str, int]:
        """Total observable uses per node: consumer edges + update/derived bindings."""
        counts = {nid: 0 for nid in self.nodes}
        for n in self.nodes.values():
            for i in n.inputs:
                if i in counts:
                    counts[i] += 1
        for nid in self.updates.values():
            if nid in counts:
                counts[nid] += 1
        for nid in self.bindings.values():
            if nid in counts:
                counts[nid] += 1
        return counts

    def topo_order(self, ids: Optional[Iterable[str]] = None) -> list[str]:
        """Topological order of node ids (insertion order is already topological
        for builder-produced graphs; this also works for pass-rewritten ones)."""
        pool = set(ids) if ids is not None else set(self.nodes)
        order: list[str] = []
        placed: set[str] = set()
        pending = [nid for nid in self.nodes if nid in pool]
        guard = 0
        while pending:
            progressed = False
            nxt = []
            for nid in pending:
                node = self.nodes[nid]
                if all((i not in pool) or (i in placed) for i in node.inputs):
                    order.append(nid)
                    placed.add(nid)
                    progressed = True
                else:
                    nxt.append(nid)
            pending = nxt
            guard += 1
            if not progressed and pending:
                raise GraphError(f"cycle detected among nodes {sorted(pending)}")
            if guard > len(self.nodes) + 2:
                raise GraphError("topological sort failed to converge")
        return order

    def const_values(self) -> set[str]:
        """Ids of values (vars and nodes) whose transitive inputs are all Constant."""
        const: set[str] = {v.id for v in self.vars.values() if v.role is Role.CONSTANT}
        for nid in self.topo_order():
            n = self.nodes[nid]
            if n.inputs and all(i in const for i in n.inputs):
                const.add(nid)
        return const


def infer_node_pattern(g: ExecutionGraph, n: OpNode) -> Pattern:
    """Conservative sparsity of a node output (used for storage decisions and
    for checking that sparse-state updates preserve the declared pattern).

    Zero-preserving elementwise ops propagate operand patterns; anything
    that can turn a structural zero nonzero degrades to Dense.
    """
    if n.kind is OpKind.MASKED_MATMUL:
        return n.mask if n.mask is not None else Dense()
    if n.kind is OpKind.ELEM_CHAIN:
        return n.mask if n.mask is not None else Dense()
    if n.kind in (OpKind.SCALE_BY_SCALAR, OpKind.SQUARE, OpKind.ABS, OpKind.SOFT_SHRINK):
        return g.value_pattern(n.inputs[0])
    if n.kind in (OpKind.ADD, OpKind.SUB):
        pa, pb = (g.value_pattern(i) for i in n.inputs)
        sa, sb = (g.value_shape(i) for i in n.inputs)
        if sa.is_scalar or sb.is_scalar:
            return Dense()  # adding a scalar fills zeros
        return pattern_union(pa, pb, n.out_shape)
    if n.kind is OpKind.MUL_ELEM:
        pa, pb = (g.value_pattern(i) for i in n.inputs)
        sa, sb = (g.value_shape(i) for i in n.inputs)
        if sa.is_scalar:
            return pb
        if sb.is_scalar:
            return pa
        # product is zero wherever either factor is; either pattern bounds it
        if not isinstance(pa, Dense):
            return pa
        return pb
    return Dense()


# ---------------------------------------------------------------------------
# shape rules


def infer_shape(kind: OpKind, shapes: list[Shape], node_desc: str = "") -> Shape:
    def fail(msg: str):
        raise ShapeError(f"{kind.value}{node_desc}: {msg}")

    def want(n: int):
        if len(shapes) != n:
            fail(f"expected {n} inputs, got {len(shapes)}")

    if kind is OpKind.MATMUL:
        want(2)
        a, b = shapes
        if a.cols != b.rows:
            fail(f"inner dims differ: {a} . {b}")
        return Shape(a.rows, b.cols)
    if kind in (OpKind.TRANSPOSE_MATMUL_LEFT, OpKind.MASKED_MATMUL):
        want(2)
        a, b = shapes
        if a.rows != b.rows:
            fail(f"inner dims differ for A^T.B: {a} . {b}")
        return Shape(a.cols, b.cols)
    if kind is OpKind.MATMUL_TRANSPOSE_RIGHT:
        want(2)
        a, b = shapes
        if a.cols != b.cols:
            fail(f"inner dims differ for A.B^T: {a} . {b}")
        return Shape(a.rows, b.rows)
    if kind is OpKind.TRANSPOSE:
        want(1)
        return Shape(shapes[0].cols, shapes[0].rows)
    if kind in (OpKind.ADD, OpKind.SUB, OpKind.MUL_ELEM):
        want(2)
        a, b = shapes
        if a == b:
            return a
        if a.is_scalar:
            return b
        if b.is_scalar:
            return a
        fail(f"shapes differ: {a} vs {b}")
    if kind is OpKind.BIAS_ADD_ROW:
        want(2)
        a, b = shapes
        if b.rows != 1 or b.cols != a.cols:
            fail(f"bias width mismatch: matrix {a}, bias {b}")
        return a
    if kind in (OpKind.SIGMOID, OpKind.SQUARE, OpKind.ABS, OpKind.SOFT_SHRINK):
        want(1)
        return shapes[0]
    if kind is OpKind.SCALE_BY_SCALAR:
        want(2)
        a, b = shapes
        if not b.is_scalar:
            fail(f"second operand must be scalar, got {b}")
        return a
    if kind is OpKind.SUM_ROWS:
        want(1)
        return Shape(1, shapes[0].cols)
    if kind is OpKind.SUM_ALL:
        want(1)
        return Shape(1, 1)
    if kind is OpKind.MULT_BIAS_SIGM:
        want(3)
        a, b, c = shapes
        if a.cols != b.rows:
            fail(f"inner dims differ: {a} . {b}")
        if c.rows != 1 or c.cols != b.cols:
            fail(f"bias width mismatch: {c}")
        return Shape(a.rows, b.cols)
    if kind is OpKind.SUB_SQ_SUM:
        want(2)
        if shapes[0] != shapes[1]:
            fail(f"shapes differ: {shapes[0]} vs {shapes[1]}")
        return Shape(1, 1)
    if kind is OpKind.ELEM_CHAIN:
        mats = [s for s in shapes if not s.is_scalar]
        base = mats[0] if mats else shapes[0]
        for s in mats:
            if s != base:
                fail(f"chain inputs disagree: {s} vs {base}")
        return base
    raise ShapeError(f"unknown op kind {kind}")


# ---------------------------------------------------------------------------
# builder


class GraphBuilder:
    """Two-phase construction: the loop body is declared first, then the
    convergence construct is attached and the graph finalized."""

    def __init__(self):
        self._g = ExecutionGraph()
        self._counter = itertools.count()
        self._scalar_consts: dict[float, str] = {}
        self._literal_values: dict[str, float] = {}

    # -- declarations --------------------------------------------------------

    def declare_var(
        self,
        kind: VarKind,
        shape: Shape,
        pattern: Optional[Pattern] = None,
        role: Role = Role.CONSTANT,
        name: Optional[str] = None,
    ) -> VarDecl:
        if kind is VarKind.SPARSE_MATRIX:
            if pattern is None or isinstance(pattern, Dense):
                raise PatternError("SparseMatrix requires a non-Dense pattern")
            pattern.validate(shape)
        elif pattern is not None:
            raise PatternError(f"pattern supplied for non-sparse kind {kind.value}")
        if kind is VarKind.SCALAR and shape != Shape(1, 1):
            raise ShapeError(f"Scalar must be 1x1, got {shape}")
        if kind is VarKind.VECTOR and shape.rows != 1:
            raise ShapeError(f"Vector must be 1xN, got {shape}")
        vid = name if name is not None else f"v{next(self._counter)}"
        if vid in self._g.vars or vid in self._g.nodes:
            raise GraphError(f"duplicate id {vid!r}")
        decl = VarDecl(vid, kind, shape, role, pattern)
        self._g.vars[vid] = decl
        return decl

    def constant_scalar(self, value: float, name: Optional[str] = None) -> VarDecl:
        """Declare (or reuse) a Constant Scalar holding a literal value."""
        key = float(value)
        if name is None and key in self._scalar_consts:
            return self._g.vars[self._scalar_consts[key]]
        decl = self.declare_var(VarKind.SCALAR, Shape(1, 1), role=Role.CONSTANT, name=name)
        if name is None:
            self._scalar_consts[key] = decl.id
        self._literal_values[decl.id] = key
        return decl

    def literal_values(self) -> dict[str, float]:
        """Values of scalars declared through `constant_scalar`."""
        return dict(self._literal_values)

    # -- nodes ---------------------------------------------------------------

    def add_node(
        self,
        kind: OpKind,
        inputs: list[str],
        theta: Optional[float] = None,
        mask: Optional[Pattern] = None,
        name: Optional[str] = None,
    ) -> OpNode:
        for i in inputs:
            if i not in self._g.vars and i not in self._g.nodes:
                raise GraphError(f"unknown input id {i!r}")
        if kind is OpKind.SOFT_SHRINK:
            if theta is None or theta < 0:
                raise GraphError("SoftShrink requires theta >= 0")
        elif theta is not None:
            raise GraphError(f"theta not accepted by {kind.value}")
        shapes = [self._g.value_shape(i) for i in inputs]
        nid = name if name is not None else f"n{next(self._counter)}"
        if nid in self._g.vars or nid in self._g.nodes:
            raise GraphError(f"duplicate id {nid!r}")
        out = infer_shape(kind, shapes, f"({nid})")
        if kind is OpKind.MASKED_MATMUL:
            if mask is None:
                raise GraphError("MaskedMatMul requires a pattern")
            mask.validate(out)
        elif mask is not None:
            raise GraphError(f"mask not accepted by {kind.value}")
        node = OpNode(nid, kind, tuple(inputs), out, theta=theta, mask=mask)
        self._g.nodes[nid] = node
        return node

    # -- bindings ------------------------------------------------------------

    def bind_update(self, state_var: str, node: str) -> None:
        if state_var not in self._g.vars:
            raise GraphError(f"unknown var {state_var!r}")
        decl = self._g.vars[state_var]
        if decl.role is not Role.STATE:
            raise GraphError(f"update target {state_var!r} has role {decl.role.value}, not State")
        if state_var in self._g.updates:
            raise GraphError(f"state var {state_var!r} is already bound")
        if node not in self._g.nodes:
            raise GraphError(f"unknown node {node!r}")
        n = self._g.nodes[node]
        if n.out_shape != decl.shape:
            raise ShapeError(f"update shape {n.out_shape} != state shape {decl.shape}")
        if decl.kind is VarKind.SPARSE_MATRIX:
            produced = infer_node_pattern(self._g, n)
            if not pattern_is_subset(produced, decl.pattern, decl.shape):
                raise PatternError(
                    f"producer {node!r} is not pattern-preserving for sparse state {state_var!r}"
                )
        self._g.updates[state_var] = node

    def bind_derived(self, var: str, node: str) -> None:
        if var not in self._g.vars or self._g.vars[var].role is not Role.DERIVED:
            raise GraphError(f"{var!r} is not a Derived var")
        if var in self._g.bindings:
            raise GraphError(f"derived var {var!r} already bound")
        if node not in self._g.nodes:
            raise GraphError(f"unknown node {node!r}")
        if self._g.nodes[node].out_shape != self._g.vars[var].shape:
            raise ShapeError(f"binding shape mismatch for {var!r}")
        self._g.bindings[var] = node

    def set_outputs(self, outputs: list[str]) -> None:
        for o in outputs:
            if o not in self._g.vars:
                raise GraphError(f"output {o!r} is not a declared var")
        self._g.outputs = list(outputs)

    def until_converged(self, cost_var: str, tol: float, max_iters: int) -> ConvergenceSpec:
        if tol <= 0:
            raise GraphError(f"tol must be > 0, got {tol}")
        if max_iters < 1:
            raise GraphError(f"max_iters must be >= 1, got {max_iters}")
        if cost_var not in self._g.vars:
            raise GraphError(f"unknown cost var {cost_var!r}")
        decl = self._g.vars[cost_var]
        if decl.kind is not VarKind.SCALAR or decl.role is not Role.DERIVED:
            raise GraphError(f"cost var {cost_var!r} must be a Derived Scalar")
        spec = ConvergenceSpec(cost_var, float(tol), int(max_iters))
        self._g.convergence = spec
        return spec

    def graph(self) -> ExecutionGraph:
        diags = validate(self._g)
        if diags:
            raise GraphError("invalid graph: " + "; ".join(diags))
        return self._g


# ---------------------------------------------------------------------------
# validation


def validate(g: ExecutionGraph) -> list[str]:
    """Return one diagnostic per invariant violation (empty when valid)."""
    diags: list[str] = []
    for v in g.vars.values():
        if v.kind is VarKind.SPARSE_MATRIX:
            if v.pattern is None or isinstance(v.pattern, Dense):
                diags.append(f"var {v.id}: SparseMatrix without a non-Dense pattern")
            else:
                try:
                    v.pattern.validate(v.shape)
                except PatternError as e:
                    diags.append(f"var {v.id}: {e}")
        elif v.pattern is not None:
            diags.append(f"var {v.id}: pattern on non-sparse kind")
    for n in g.nodes.values():
        shapes = []
        broken = False
        for i in n.inputs:
            if i not in g.vars and i not in g.nodes:
                diags.append(f"node {n.id}: dangling input {i!r}")
                broken = True
        if broken:
            continue
        shapes = [g.value_shape(i) for i in n.inputs]
        try:
            expect = infer_shape(n.kind, shapes)
            if expect != n.out_shape:
                diags.append(f"node {n.id}: out_shape {n.out_shape} != inferred {expect}")
        except ShapeError as e:
            diags.append(f"node {n.id}: {e}")
    try:
        g.topo_order()
    except GraphError as e:
        diags.append(str(e))
    for var, nid in g.updates.items():
        if var not in g.vars:
            diags.append(f"update target {var!r} undeclared")
            continue
        decl = g.vars[var]
        if decl.role is not Role.STATE:
            diags.append(f"update target {var} has role {decl.role.value}, not State")
        if nid not in g.nodes:
            diags.append(f"update for {var} references unknown node {nid!r}")
            continue
        if g.nodes[nid].out_shape != decl.shape:
            diags.append(f"update for {var}: shape mismatch")
        if decl.role is Role.STATE and decl.kind is VarKind.SPARSE_MATRIX and decl.pattern is not None:
            produced = infer_node_pattern(g, g.nodes[nid])
            if not pattern_is_subset(produced, decl.pattern, decl.shape):
                diags.append(f"update for {var}: producer {nid} is not pattern-preserving")
    for v in g.vars.values():
        if v.role is Role.STATE and v.id not in g.updates:
            diags.append(f"state var {v.id} has no update binding")
    seen_producers: dict[str, str] = {}
    for var, nid in g.updates.items():
        if nid in seen_producers:
            diags.append(f"node {nid} updates both {seen_producers[nid]} and {var}")
        seen_producers[nid] = var
    for var, nid in g.bindings.items():
        if var not in g.vars or g.vars[var].role is not Role.DERIVED:
            diags.append(f"binding target {var!r} is not a Derived var")
        if nid not in g.nodes:
            diags.append(f"binding for {var} references unknown node {nid!r}")
    for var in g.vars.values():
        if var.role is Role.DERIVED and var.id not in g.bindings:
            diags.append(f"derived var {var.id} has no producing node")
    for o in g.outputs:
        if o not in g.vars:
            diags.append(f"output {o!r} is not a declared var")
    if g.convergence is not None:
        c = g.convergence
        if c.cost_var not in g.vars:
            diags.append(f"cost var {c.cost_var!r} undeclared")
        else:
            decl = g.vars[c.cost_var]
            if decl.kind is not VarKind.SCALAR or decl.role is not Role.DERIVED:
                diags.append(f"cost var {c.cost_var} must be a Derived Scalar")
        if c.tol <= 0:
            diags.append(f"tol must be > 0, got {c.tol}")
    return diags


def should_stop(prev_cost: float, cost: float, tol: float) -> bool:
    """Relative-change stopping rule with a strict-less comparison."""
    return abs(cost - prev_cost) / max(abs(prev_cost), EPS_NORMALIZE) < tol


# ---------------------------------------------------------------------------
# canonical signature (isomorphism checks, pipeline idempotence tests)


def graph_signature(g: ExecutionGraph) -> tuple:
    """A canonical, id-independent structural fingerprint of the graph.

    Two graphs with the same signature have the same node-kind multiset and
    edge structure relative to equally-named variables.
    """
    labels: dict[str, str] = {}
    for v in g.vars.values():
        labels[v.id] = f"var:{v.kind.value}:{v.role.value}:{v.shape}"
    for nid in g.topo_order():
        n = g.nodes[nid]
        parts = [n.kind.value, str(n.out_shape)] + [labels[i] for i in n.inputs]
        if n.theta is not None:
            parts.append(f"theta={n.theta!r}")
        if n.program is not None:
            parts.append("prog=" + ";".join(s.kind.value for s in n.program))
        labels[nid] = "(" + ",".join(parts) + ")"
    sig_nodes = tuple(sorted(labels[nid] for nid in g.nodes))
    sig_updates = tuple(sorted(f"{v}<-{labels[n]}" for v, n in g.updates.items()))
    sig_bind = tuple(sorted(f"{v}<-{labels[n]}" for v, n in g.bindings.items()))
    sig_pre = tuple(sorted(labels[nid] for nid in g.preamble))
    return (sig_nodes, sig_updates, sig_bind, tuple(g.outputs), sig_pre)
