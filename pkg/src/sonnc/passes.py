"""Static optimization pipeline: rewrite -> hoist -> fuse -> DCE.

Rewriting canonicalizes transpose-then-multiply chains and distributes /
reassociates products when doing so exposes all-constant subexpressions.
Hoisting moves every node whose transitive inputs are constant into a
one-time preamble.  Fusion collapses recognized single-consumer chains
into fused kernels.  DCE sweeps anything unreachable from the outputs,
the state updates, and the convergence cost.

Passes are pure: they return a rewritten copy and a report, never mutate
their input.  The pipeline is idempotent.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

from .graph import (
    ELEMWISE_KINDS,
    ChainStep,
    Dense,
    ExecutionGraph,
    OpKind,
    OpNode,
    infer_node_pattern,
    infer_shape,
)


@dataclass
class PassReport:
    pass_name: str
    nodes_removed: int = 0
    nodes_hoisted: int = 0
    fusions: list[tuple[str, tuple[str, ...], str]] = field(default_factory=list)
    rewrites: list[tuple[str, str]] = field(default_factory=list)  # (rule, node id)
    removed_ids: list[str] = field(default_factory=list)
    hoisted_ids: list[str] = field(default_factory=list)

    def dump_lines(self) -> list[str]:
        lines = [f"pass={self.pass_name}"]
        for rule, nid in self.rewrites:
            lines.append(f"rewrite: rule={rule} node={nid}")
        for nid in self.hoisted_ids:
            lines.append(f"hoist: node={nid}")
        for name, replaced, new in self.fusions:
            lines.append(f"fusion: pattern={name} replaced={','.join(replaced)} new={new}")
        for nid in self.removed_ids:
            lines.append(f"dce: removed={nid}")
        return lines


@dataclass(frozen=True)
class FusionPattern:
    """A recognized operation sequence and its fused replacement.

    Linear patterns name an exact producer chain ending at the last kind;
    the cluster pattern instead greedily groups same-shape elementwise
    nodes.  Either way only single-consumer intermediates are fused away.
    """

    name: str
    replacement: OpKind
    sequence: Optional[tuple[OpKind, ...]] = None
    cluster_ops: Optional[frozenset[OpKind]] = None
    min_len: int = 2


DEFAULT_PATTERNS = (
    FusionPattern(
        "MultBiasSigm",
        OpKind.MULT_BIAS_SIGM,
        sequence=(OpKind.MATMUL, OpKind.BIAS_ADD_ROW, OpKind.SIGMOID),
    ),
    FusionPattern(
        "SubSqSum",
        OpKind.SUB_SQ_SUM,
        sequence=(OpKind.SUB, OpKind.SQUARE, OpKind.SUM_ALL),
    ),
    FusionPattern("ElemChain", OpKind.ELEM_CHAIN, cluster_ops=ELEMWISE_KINDS),
)


def _fresh_id(g: ExecutionGraph, prefix: str = "r") -> str:
    for i in itertools.count():
        nid = f"{prefix}{i}"
        if nid not in g.nodes and nid not in g.vars:
            return nid
    raise AssertionError


# ---------------------------------------------------------------------------
# operation rewriting


def rewrite_ops(g: ExecutionGraph) -> tuple[ExecutionGraph, PassReport]:
    g = g.clone()
    report = PassReport("rewrite")
    changed = True
    while changed:
        changed = False
        const = g.const_values()
        for nid in list(g.topo_order()):
            n = g.nodes[nid]
            if n.kind is OpKind.MATMUL:
                left = g.nodes.get(n.inputs[0])
                right = g.nodes.get(n.inputs[1])
                if left is not None and left.kind is OpKind.TRANSPOSE:
                    n.kind = OpKind.TRANSPOSE_MATMUL_LEFT
                    n.inputs = (left.inputs[0], n.inputs[1])
                    report.rewrites.append(("transpose-matmul-left", nid))
                    changed = True
                    continue
                if right is not None and right.kind is OpKind.TRANSPOSE:
                    n.kind = OpKind.MATMUL_TRANSPOSE_RIGHT
                    n.inputs = (n.inputs[0], right.inputs[0])
                    report.rewrites.append(("matmul-transpose-right", nid))
                    changed = True
                    continue
                # distribute (A +- B) . C when C is constant and one addend is
                # constant: exposes a hoistable product
                if (
                    left is not None
                    and left.kind in (OpKind.ADD, OpKind.SUB)
                    and n.inputs[1] in const
                    and n.inputs[0] not in const
                    and any(i in const for i in left.inputs)
                    and all(not g.value_shape(i).is_scalar for i in left.inputs)
                ):
                    a, bb = left.inputs
                    c = n.inputs[1]
                    na = OpNode(_fresh_id(g), OpKind.MATMUL, (a, c),
                                infer_shape(OpKind.MATMUL, [g.value_shape(a), g.value_shape(c)]))
                    g.nodes[na.id] = na
                    nb = OpNode(_fresh_id(g), OpKind.MATMUL, (bb, c),
                                infer_shape(OpKind.MATMUL, [g.value_shape(bb), g.value_shape(c)]))
                    g.nodes[nb.id] = nb
                    n.kind = left.kind
                    n.inputs = (na.id, nb.id)
                    report.rewrites.append(("distribute-matmul", nid))
                    changed = True
                    continue
                # reassociate (A . B) . C -> A . (B . C) when B, C are constant
                if (
                    left is not None
                    and left.kind is OpKind.MATMUL
                    and n.inputs[1] in const
                    and left.inputs[1] in const
                    and left.inputs[0] not in const
                ):
                    b_id, c_id = left.inputs[1], n.inputs[1]
                    bc = OpNode(_fresh_id(g), OpKind.MATMUL, (b_id, c_id),
                                infer_shape(OpKind.MATMUL, [g.value_shape(b_id), g.value_shape(c_id)]))
                    g.nodes[bc.id] = bc
                    n.inputs = (left.inputs[0], bc.id)
                    report.rewrites.append(("reassociate-matmul", nid))
                    changed = True
                    continue
                # same reassociation when the inner product is A . C^T-form
                if (
                    left is not None
                    and left.kind is OpKind.MATMUL_TRANSPOSE_RIGHT
                    and n.inputs[1] in const
                    and left.inputs[1] in const
                    and left.inputs[0] not in const
                ):
                    w_id, c_id = left.inputs[1], n.inputs[1]
                    # (A . W^T) . C == A . (W^T . C) == A . TML(W, C)
                    bc = OpNode(_fresh_id(g), OpKind.TRANSPOSE_MATMUL_LEFT, (w_id, c_id),
                                infer_shape(OpKind.TRANSPOSE_MATMUL_LEFT,
                                            [g.value_shape(w_id), g.value_shape(c_id)]))
                    g.nodes[bc.id] = bc
                    n.inputs = (left.inputs[0], bc.id)
                    report.rewrites.append(("reassociate-matmul-tr", nid))
                    changed = True
                    continue
    return g, report


# ---------------------------------------------------------------------------
# loop-invariant hoisting


def hoist_invariants(g: ExecutionGraph) -> tuple[ExecutionGraph, PassReport]:
    g = g.clone()
    report = PassReport("hoist")
    const = g.const_values()
    for nid in g.topo_order():
        if nid in const and nid not in g.preamble:
            g.preamble.add(nid)
            report.hoisted_ids.append(nid)
    report.nodes_hoisted = len(report.hoisted_ids)
    return g, report


# ---------------------------------------------------------------------------
# method fusion


def _match_linear(g: ExecutionGraph, pattern: FusionPattern, terminal: OpNode,
                  uses: dict[str, int], bound: set[str]) -> Optional[list[OpNode]]:
    """Walk producers backwards along input[0]; intermediates must be
    single-consumer body nodes with no update/derived binding on them."""
    seq = pattern.sequence
    if terminal.kind is not seq[-1]:
        return None
    chain = [terminal]
    node = terminal
    for want in reversed(seq[:-1]):
        pid = node.inputs[0]
        prod = g.nodes.get(pid)
        if prod is None or prod.kind is not want or pid in g.preamble:
            return None
        if uses.get(pid, 0) != 1 or pid in bound:
            return None
        chain.append(prod)
        node = prod
    chain.reverse()
    return chain


def _fuse_linear(g: ExecutionGraph, pattern: FusionPattern, chain: list[OpNode],
                 report: PassReport) -> None:
    external: list[str] = []
    member_ids = {n.id for n in chain}
    for n in chain:
        for i in n.inputs:
            if i not in member_ids:
                external.append(i)
    terminal = chain[-1]
    replaced = tuple(n.id for n in chain)
    terminal.kind = pattern.replacement
    terminal.inputs = tuple(external)
    for n in chain[:-1]:
        del g.nodes[n.id]
    report.fusions.append((pattern.name, replaced, terminal.id))


def _cluster_program(g: ExecutionGraph, members: list[OpNode], terminal: OpNode) -> tuple[list[str], tuple[ChainStep, ...], OpNode]:
    member_ids = {n.id for n in members}
    external: list[str] = []
    ext_index: dict[str, int] = {}
    order = [nid for nid in g.topo_order(member_ids)]
    step_of: dict[str, int] = {}
    steps: list[ChainStep] = []
    for si, nid in enumerate(order):
        n = g.nodes[nid]
        args = []
        for i in n.inputs:
            if i in member_ids:
                args.append(("tmp", step_of[i]))
            else:
                if i not in ext_index:
                    ext_index[i] = len(external)
                    external.append(i)
                args.append(("in", ext_index[i]))
        steps.append(ChainStep(n.kind, tuple(args), theta=n.theta))
        step_of[nid] = si
    return external, tuple(steps), terminal


def fuse_methods(g: ExecutionGraph, patterns: tuple[FusionPattern, ...] = DEFAULT_PATTERNS) -> tuple[ExecutionGraph, PassReport]:
    g = g.clone()
    report = PassReport("fuse")
    for pattern in patterns:
        if pattern.sequence is not None:
            matched = True
            while matched:
                matched = False
                uses = g.use_counts()
                bound = set(g.updates.values()) | set(g.bindings.values())
                for nid in list(g.topo_order()):
                    n = g.nodes.get(nid)
                    if n is None or nid in g.preamble:
                        continue
                    chain = _match_linear(g, pattern, n, uses, bound)
                    if chain is not None:
                        _fuse_linear(g, pattern, chain, report)
                        matched = True
                        break
        else:
            _fuse_clusters(g, pattern, report)
    return g, report


def _fuse_clusters(g: ExecutionGraph, pattern: FusionPattern, report: PassReport) -> None:
    uses = g.use_counts()
    visited: set[str] = set()
    for seed_id in reversed(g.topo_order()):
        n = g.nodes.get(seed_id)
        if (
            n is None
            or seed_id in visited
            or seed_id in g.preamble
            or n.kind not in pattern.cluster_ops
        ):
            continue
        shape = n.out_shape
        cluster: dict[str, OpNode] = {seed_id: n}
        grew = True
        while grew:
            grew = False
            for mid in list(cluster):
                m = cluster[mid]
                for i in m.inputs:
                    p = g.nodes.get(i)
                    if (
                        p is None
                        or i in cluster
                        or i in visited
                        or i in g.preamble
                        or p.kind not in pattern.cluster_ops
                        or p.out_shape != shape
                    ):
                        continue
                    consumers_in = sum(
                        1 for c in cluster.values() for x in c.inputs if x == i
                    )
                    if uses.get(i, 0) == consumers_in:
                        cluster[i] = p
                        grew = True
        visited.update(cluster)
        if len(cluster) < pattern.min_len:
            continue
        members = list(cluster.values())
        terminal = g.nodes[seed_id]
        out_pattern = infer_node_pattern(g, terminal)
        external, steps, terminal = _cluster_program(g, members, terminal)
        replaced = tuple(sorted(cluster))
        terminal.kind = pattern.replacement
        terminal.inputs = tuple(external)
        terminal.program = steps
        terminal.theta = None
        terminal.mask = None if isinstance(out_pattern, Dense) else out_pattern
        for mid in cluster:
            if mid != terminal.id:
                del g.nodes[mid]
        report.fusions.append((pattern.name, replaced, terminal.id))


# ---------------------------------------------------------------------------
# dead code elimination


def dead_code_elim(g: ExecutionGraph) -> tuple[ExecutionGraph, PassReport]:
    g = g.clone()
    report = PassReport("dce")
    roots: set[str] = set(g.updates.values())
    live_vars: set[str] = set(g.outputs)
    if g.convergence is not None:
        live_vars.add(g.convergence.cost_var)
    for var in live_vars:
        nid = g.bindings.get(var)
        if nid is not None:
            roots.add(nid)
    reachable: set[str] = set()
    stack = [r for r in roots if r in g.nodes]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        for i in g.nodes[nid].inputs:
            if i in g.nodes:
                stack.append(i)
    dead = [nid for nid in g.nodes if nid not in reachable]
    for nid in dead:
        del g.nodes[nid]
        g.preamble.discard(nid)
    # drop derived vars whose producing node died (they were not rooted)
    for var, nid in list(g.bindings.items()):
        if nid not in g.nodes:
            del g.bindings[var]
            if var not in g.outputs:
                del g.vars[var]
    report.removed_ids = sorted(dead)
    report.nodes_removed = len(dead)
    return g, report


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(
    g: ExecutionGraph,
    patterns: tuple[FusionPattern, ...] = DEFAULT_PATTERNS,
    no_fusion: bool = False,
    no_hoist: bool = False,
) -> tuple[ExecutionGraph, list[PassReport]]:
    """rewrite -> hoist -> fuse -> DCE, in that fixed order."""
    reports = []
    g, r = rewrite_ops(g)
    reports.append(r)
    if not no_hoist:
        g, r = hoist_invariants(g)
        reports.append(r)
    if not no_fusion:
        g, r = fuse_methods(g, patterns)
        reports.append(r)
    g, r = dead_code_elim(g)
    reports.append(r)
    return g, reports
