"""JSON graph-description documents.

This is the on-the-wire / on-disk form a client (CLI, service, scripting
frontend) uses to hand a graph to the engine.  Parsing is strict: unknown
fields are rejected at every level, and `version` must equal 1.

Document layout::

    {
      "version": 1,
      "vars": [
        {"id": "W", "kind": "SparseMatrix", "shape": [16, 8], "role": "State",
         "pattern": {"type": "blocklist", "blocks": [[0, 0, 4, 4], ...]}},
        {"id": "cost", "kind": "Scalar", "shape": [1, 1], "role": "Derived",
         "node": "n9"}
      ],
      "nodes": [
        {"id": "n1", "kind": "MatMul", "inputs": ["V", "W"]},
        {"id": "n5", "kind": "SoftShrink", "inputs": ["n4"], "theta": 0.25},
        {"id": "n7", "kind": "MaskedMatMul", "inputs": ["V", "n6"],
         "pattern": {"type": "coord", "coords": [[0, 1], ...]}}
      ],
      "updates": {"W": "n8"},
      "outputs": ["W", "cost"],
      "convergence": {"cost": "cost", "tol": 1e-6, "max_iters": 100}
    }

Pattern records: {"type": "dense"} | {"type": "blocklist", "blocks":
[[row0, col0, height, width], ...]} | {"type": "coord", "coords":
[[row, col], ...]}.  Derived vars carry a "node" field naming their
producing node.
"""

from __future__ import annotations

from typing import Any

from .errors import GraphError
from .graph import (
    BUILDER_OP_KINDS,
    Block,
    BlockList,
    Coord,
    ConvergenceSpec,
    Dense,
    ExecutionGraph,
    GraphBuilder,
    OpKind,
    Pattern,
    Role,
    Shape,
    VarKind,
    validate,
)

DOC_VERSION = 1


def _check_fields(rec: dict, allowed: set[str], where: str) -> None:
    unknown = set(rec) - allowed
    if unknown:
        raise GraphError(f"{where}: unknown field(s) {sorted(unknown)}")


def _pattern_from_record(rec: Any, where: str) -> Pattern:
    if not isinstance(rec, dict) or "type" not in rec:
        raise GraphError(f"{where}: pattern must be an object with a 'type' field")
    t = rec["type"]
    if t == "dense":
        _check_fields(rec, {"type"}, where)
        return Dense()
    if t == "blocklist":
        _check_fields(rec, {"type", "blocks"}, where)
        blocks = rec.get("blocks")
        if not isinstance(blocks, list):
            raise GraphError(f"{where}: 'blocks' must be a list of quadruples")
        out = []
        for q in blocks:
            if not (isinstance(q, list) and len(q) == 4 and all(isinstance(x, int) for x in q)):
                raise GraphError(f"{where}: bad block record {q!r}")
            out.append(Block(*q))
        return BlockList(tuple(out))
    if t == "coord":
        _check_fields(rec, {"type", "coords"}, where)
        coords = rec.get("coords")
        if not isinstance(coords, list):
            raise GraphError(f"{where}: 'coords' must be a list of pairs")
        out = []
        for p in coords:
            if not (isinstance(p, list) and len(p) == 2 and all(isinstance(x, int) for x in p)):
                raise GraphError(f"{where}: bad coordinate record {p!r}")
            out.append((p[0], p[1]))
        return Coord(tuple(out))
    raise GraphError(f"{where}: unknown pattern type {t!r}")


def _pattern_to_record(p: Pattern) -> dict:
    if isinstance(p, Dense):
        return {"type": "dense"}
    if isinstance(p, BlockList):
        return {"type": "blocklist", "blocks": [[b.row0, b.col0, b.height, b.width] for b in p.blocks]}
    return {"type": "coord", "coords": [[r, c] for r, c in p.coords]}


def parse_document(doc: Any) -> ExecutionGraph:
    """Build and validate an ExecutionGraph from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise GraphError("document root must be an object")
    _check_fields(doc, {"version", "vars", "nodes", "updates", "outputs", "convergence"}, "document")
    if doc.get("version") != DOC_VERSION:
        raise GraphError(f"unsupported document version {doc.get('version')!r} (expected {DOC_VERSION})")
    for req in ("vars", "nodes"):
        if not isinstance(doc.get(req), list):
            raise GraphError(f"document field '{req}' must be a list")

    b = GraphBuilder()
    derived_nodes: dict[str, str] = {}
    for rec in doc["vars"]:
        if not isinstance(rec, dict):
            raise GraphError("var record must be an object")
        where = f"var {rec.get('id', '?')!r}"
        _check_fields(rec, {"id", "kind", "shape", "role", "pattern", "node", "init"}, where)
        try:
            kind = VarKind(rec["kind"])
            role = Role(rec["role"])
        except (KeyError, ValueError) as e:
            raise GraphError(f"{where}: bad kind/role ({e})") from None
        shp = rec.get("shape")
        if not (isinstance(shp, list) and len(shp) == 2 and all(isinstance(x, int) for x in shp)):
            raise GraphError(f"{where}: shape must be [rows, cols]")
        pattern = None
        if "pattern" in rec:
            pattern = _pattern_from_record(rec["pattern"], where)
        if "node" in rec:
            if role is not Role.DERIVED:
                raise GraphError(f"{where}: 'node' only valid on Derived vars")
            derived_nodes[rec["id"]] = rec["node"]
        if "init" in rec and role is Role.DERIVED:
            raise GraphError(f"{where}: 'init' only valid on Constant/State vars")
        b.declare_var(kind, Shape(*shp), pattern=pattern, role=role, name=rec["id"])

    for rec in doc["nodes"]:
        if not isinstance(rec, dict):
            raise GraphError("node record must be an object")
        where = f"node {rec.get('id', '?')!r}"
        _check_fields(rec, {"id", "kind", "inputs", "theta", "pattern"}, where)
        try:
            kind = OpKind(rec["kind"])
        except (KeyError, ValueError):
            raise GraphError(f"{where}: unknown op kind {rec.get('kind')!r}") from None
        if kind not in BUILDER_OP_KINDS:
            raise GraphError(f"{where}: kind {kind.value} is compiler-internal")
        inputs = rec.get("inputs")
        if not (isinstance(inputs, list) and all(isinstance(x, str) for x in inputs)):
            raise GraphError(f"{where}: inputs must be a list of ids")
        mask = None
        if "pattern" in rec:
            if kind is not OpKind.MASKED_MATMUL:
                raise GraphError(f"{where}: pattern only valid on MaskedMatMul")
            mask = _pattern_from_record(rec["pattern"], where)
        theta = rec.get("theta")
        if theta is not None and not isinstance(theta, (int, float)):
            raise GraphError(f"{where}: theta must be a number")
        b.add_node(kind, inputs, theta=theta, mask=mask, name=rec["id"])

    updates = doc.get("updates", {})
    if not isinstance(updates, dict):
        raise GraphError("document field 'updates' must be an object")
    for var, nid in updates.items():
        b.bind_update(var, nid)
    for var, nid in derived_nodes.items():
        b.bind_derived(var, nid)

    outputs = doc.get("outputs", [])
    if not isinstance(outputs, list):
        raise GraphError("document field 'outputs' must be a list")
    b.set_outputs(outputs)

    conv = doc.get("convergence")
    if conv is not None:
        if not isinstance(conv, dict):
            raise GraphError("convergence must be an object")
        _check_fields(conv, {"cost", "tol", "max_iters"}, "convergence")
        for f in ("cost", "tol", "max_iters"):
            if f not in conv:
                raise GraphError(f"convergence: missing field '{f}'")
        b.until_converged(conv["cost"], conv["tol"], conv["max_iters"])
    return b.graph()


def document_initial_values(doc: dict, g: ExecutionGraph):
    """Per-var `init` payloads, reshaped and validated against declarations."""
    import numpy as np

    out = {}
    for rec in doc.get("vars", []):
        if "init" not in rec:
            continue
        vid = rec["id"]
        decl = g.vars[vid]
        arr = np.asarray(rec["init"], dtype=np.float64)
        want = (decl.shape.rows, decl.shape.cols)
        if arr.size != want[0] * want[1]:
            raise GraphError(f"var {vid!r}: init has {arr.size} entries, want {want[0] * want[1]}")
        out[vid] = arr.reshape(want)
    return out


def to_document(g: ExecutionGraph, initial_values=None) -> dict:
    """Serialize a builder-level graph (no fused kinds) to document form."""
    diags = validate(g)
    if diags:
        raise GraphError("cannot serialize invalid graph: " + "; ".join(diags))
    vars_out = []
    for v in g.vars.values():
        rec: dict = {
            "id": v.id,
            "kind": v.kind.value,
            "shape": [v.shape.rows, v.shape.cols],
            "role": v.role.value,
        }
        if v.pattern is not None:
            rec["pattern"] = _pattern_to_record(v.pattern)
        if v.id in g.bindings:
            rec["node"] = g.bindings[v.id]
        if initial_values is not None and v.id in initial_values:
            arr = initial_values[v.id]
            rec["init"] = [[float(x) for x in row] for row in arr]
        vars_out.append(rec)
    nodes_out = []
    for nid in g.topo_order():
        n = g.nodes[nid]
        if n.kind not in BUILDER_OP_KINDS:
            raise GraphError(f"node {nid}: kind {n.kind.value} is not serializable")
        rec = {"id": n.id, "kind": n.kind.value, "inputs": list(n.inputs)}
        if n.theta is not None:
            rec["theta"] = n.theta
        if n.mask is not None:
            rec["pattern"] = _pattern_to_record(n.mask)
        nodes_out.append(rec)
    doc = {
        "version": DOC_VERSION,
        "vars": vars_out,
        "nodes": nodes_out,
        "updates": dict(g.updates),
        "outputs": list(g.outputs),
    }
    if g.convergence is not None:
        c = g.convergence
        doc["convergence"] = {"cost": c.cost_var, "tol": c.tol, "max_iters": c.max_iters}
    return doc
