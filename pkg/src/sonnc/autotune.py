"""Machine calibration and joint block-size / thread-count selection.

At install time `calibrate` times the blocked dense matmul over an
exponentially spaced grid of matrix dimensions, block sizes, and thread
counts, and stores the medians in a persistent lookup table together
with the host's cache sizes.  At plan time `select_params` scans every
calibrated (b, t) cell, predicting each candidate's cost by multilinear
interpolation in log2-space over the dimension axes, and returns the
argmin.  The scan is exhaustive on purpose: the timing surface is
nonconvex in the thread count, so greedy or gradient schemes are unsafe.

Queries beyond the calibrated dimension range extrapolate linearly from
the last two grid points; queries below it clamp to the smallest point.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import TableError
from .graph import (
    MATMUL_KINDS,
    BlockList,
    Coord,
    Dense,
    ExecutionGraph,
    OpKind,
)
from .storage import Format, Layout, StorageDecision, pack

TABLE_MAGIC = "SONNC-TUNE"
TABLE_VERSION = 1


@dataclass(frozen=True)
class TuneQuery:
    m: int
    k: int
    n: int
    weight: float = 1.0


@dataclass(frozen=True)
class Selection:
    block_size: int
    threads: int
    predicted_seconds: float
    clamped: bool = False


@dataclass
class TuneTable:
    l1_bytes: int
    l2_bytes: int
    m_axis: tuple[int, ...]
    k_axis: tuple[int, ...]
    n_axis: tuple[int, ...]
    b_axis: tuple[int, ...]
    t_axis: tuple[int, ...]
    entries: dict[tuple[int, int, int, int, int], float] = field(default_factory=dict)
    version: int = TABLE_VERSION

    def check(self) -> None:
        for name, axis in (("m", self.m_axis), ("k", self.k_axis), ("n", self.n_axis),
                           ("b", self.b_axis), ("t", self.t_axis)):
            if not axis:
                raise TableError(f"empty {name} axis")
            if list(axis) != sorted(set(axis)):
                raise TableError(f"non-monotone {name} axis: {axis}")
            for v in axis:
                if v < 1 or (v & (v - 1)) != 0:
                    raise TableError(f"{name} axis value {v} is not a power of 2")
        for key, sec in self.entries.items():
            if sec <= 0:
                raise TableError(f"non-positive timing at {key}")


def _pow2_axis(lo: int, hi: int) -> tuple[int, ...]:
    if hi < lo:
        lo = hi
    out = []
    v = lo
    while v <= hi:
        out.append(v)
        v *= 2
    return tuple(out)


def default_max_threads() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# cache discovery


def _sysfs_cache_sizes() -> Optional[tuple[int, int]]:
    base = "/sys/devices/system/cpu/cpu0/cache"
    if not os.path.isdir(base):
        return None
    l1 = l2 = None
    try:
        for entry in sorted(os.listdir(base)):
            if not entry.startswith("index"):
                continue
            d = os.path.join(base, entry)
            with open(os.path.join(d, "level")) as f:
                level = int(f.read().strip())
            typ = ""
            tpath = os.path.join(d, "type")
            if os.path.exists(tpath):
                with open(tpath) as f:
                    typ = f.read().strip()
            with open(os.path.join(d, "size")) as f:
                raw = f.read().strip()
            mult = 1
            if raw.endswith("K"):
                mult, raw = 1024, raw[:-1]
            elif raw.endswith("M"):
                mult, raw = 1024 * 1024, raw[:-1]
            size = int(raw) * mult
            if level == 1 and typ in ("Data", "Unified", ""):
                l1 = size
            elif level == 2:
                l2 = size
    except (OSError, ValueError):
        return None
    if l1 and l2:
        return l1, l2
    return None


def _stride_scan_cache_sizes() -> tuple[int, int]:
    """Fallback: find bandwidth knees by timing strided sweeps over growing
    buffers.  Crude, but only the order of magnitude matters."""
    sizes = [2 ** p for p in range(12, 25)]  # 4KB .. 16MB
    per_elem = []
    for size in sizes:
        n = size // 8
        buf = np.zeros(n)
        reps = max(1, (1 << 22) // size)
        t0 = time.perf_counter()
        for _ in range(reps):
            buf[::8].sum()
        dt = (time.perf_counter() - t0) / reps / max(n // 8, 1)
        per_elem.append(dt)
    knees = []
    for i in range(1, len(sizes)):
        if per_elem[i] > per_elem[i - 1] * 1.4:
            knees.append(sizes[i - 1])
    l1 = knees[0] if knees else 32 * 1024
    l2 = knees[1] if len(knees) > 1 else max(l1 * 8, 1024 * 1024)
    return l1, l2


def detect_cache_sizes() -> tuple[int, int]:
    found = _sysfs_cache_sizes()
    if found is not None:
        return found
    return _stride_scan_cache_sizes()


# ---------------------------------------------------------------------------
# calibration


def time_blocked_gemm(m: int, k: int, n: int, b: int, t: int, reps: int,
                      rng: np.random.Generator) -> float:
    """Median wall time of the artifact's own blocked matmul at (b, t)."""
    from . import executor  # local import: executor pulls in the kernel set
    from .graph import OpNode, Shape
    from .kernels import KernelTask
    from .storage import alloc_packed

    dec_a = StorageDecision("A", Format.DENSE_BLOCKED, b, Layout.ROW_MAJOR)
    dec_b = StorageDecision("B", Format.DENSE_BLOCKED, b, Layout.ROW_MAJOR)
    dec_o = StorageDecision("O", Format.DENSE_BLOCKED, b, Layout.ROW_MAJOR)
    buffers = {
        "A": pack(rng.uniform(-1, 1, (m, k)), Dense(), dec_a),
        "B": pack(rng.uniform(-1, 1, (k, n)), Dense(), dec_b),
        "O": alloc_packed(Shape(m, n), Dense(), dec_o),
    }
    nbr, nbc = buffers["O"].grid()
    tasks = [
        KernelTask("gemm", OpKind.MATMUL, ("A", "B"), "O", (bi, bj))
        for bi in range(nbr)
        for bj in range(nbc)
    ]
    phase = executor.Phase(tasks, [tasks[w::t] for w in range(t)])
    pool = executor._Pool(t)
    try:
        pool.run_phase(phase, buffers)  # warm path (allocators, code)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            pool.run_phase(phase, buffers)
            times.append(time.perf_counter() - t0)
    finally:
        pool.close()
    return float(np.median(times))


def calibrate(
    max_dim: int = 4096,
    max_block: int = 512,
    max_threads: Optional[int] = None,
    reps: int = 3,
    mem_budget_bytes: int = 2 << 30,
    progress: Optional[callable] = None,
) -> TuneTable:
    """Time the blocked matmul over the power-of-2 grid and build the table.

    Grid points whose operands exceed the memory budget are skipped (the
    table tolerates holes).  Calibration owns the machine while running.
    """
    if reps < 3:
        raise TableError(f"reps must be >= 3 (median window), got {reps}")
    if max_threads is None:
        max_threads = default_max_threads()
    for name, v in (("max_dim", max_dim), ("max_block", max_block), ("max_threads", max_threads)):
        if v < 1 or (v & (v - 1)) != 0:
            raise TableError(f"{name} must be a power of 2, got {v}")
    dim_lo = min(32, max_dim)
    m_axis = _pow2_axis(dim_lo, max_dim)
    k_axis = m_axis
    n_axis = m_axis
    b_axis = _pow2_axis(1, max_block)
    t_axis = _pow2_axis(1, max_threads)
    l1, l2 = detect_cache_sizes()
    table = TuneTable(l1, l2, m_axis, k_axis, n_axis, b_axis, t_axis)
    rng = np.random.default_rng(1234)
    total = len(m_axis) * len(k_axis) * len(n_axis) * len(b_axis) * len(t_axis)
    done = 0
    for m in m_axis:
        for k in k_axis:
            for n in n_axis:
                need = 8 * (m * k + k * n + m * n)
                for b in b_axis:
                    for t in t_axis:
                        done += 1
                        if need > mem_budget_bytes:
                            continue  # skipped point, never fabricated
                        sec = time_blocked_gemm(m, k, n, b, t, reps, rng)
                        table.entries[(m, k, n, b, t)] = max(sec, 1e-9)
                        if progress is not None:
                            progress(done, total)
    table.check()
    return table


# ---------------------------------------------------------------------------
# persistence (line-oriented text format)


def dumps_table(table: TuneTable) -> str:
    table.check()
    lines = [f"{TABLE_MAGIC} v{table.version}"]
    lines.append(f"cache l1={table.l1_bytes} l2={table.l2_bytes}")
    axes = " ".join(
        f"{name}={','.join(str(v) for v in axis)}"
        for name, axis in (("m", table.m_axis), ("k", table.k_axis), ("n", table.n_axis),
                           ("b", table.b_axis), ("t", table.t_axis))
    )
    lines.append(f"axes {axes}")
    for key in sorted(table.entries):
        m, k, n, b, t = key
        lines.append(f"{m} {k} {n} {b} {t} {table.entries[key]!r}")
    return "\n".join(lines) + "\n"


def save_table(table: TuneTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_table(table))


def loads_table(text: str) -> TuneTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise TableError("truncated tune table")
    head = lines[0].split()
    if len(head) != 2 or head[0] != TABLE_MAGIC or not head[1].startswith("v"):
        raise TableError(f"bad header {lines[0]!r}")
    try:
        version = int(head[1][1:])
    except ValueError:
        raise TableError(f"bad version field {head[1]!r}") from None
    if version != TABLE_VERSION:
        raise TableError(f"table version {version} unsupported (reader is v{TABLE_VERSION})")
    cache = lines[1].split()
    if cache[0] != "cache" or len(cache) != 3:
        raise TableError(f"bad cache line {lines[1]!r}")
    try:
        l1 = int(cache[1].split("=", 1)[1])
        l2 = int(cache[2].split("=", 1)[1])
    except (IndexError, ValueError):
        raise TableError(f"bad cache line {lines[1]!r}") from None
    ax = lines[2].split()
    if ax[0] != "axes" or len(ax) != 6:
        raise TableError(f"bad axes line {lines[2]!r}")
    axes = {}
    for fieldspec in ax[1:]:
        name, _, csv = fieldspec.partition("=")
        try:
            axes[name] = tuple(int(x) for x in csv.split(","))
        except ValueError:
            raise TableError(f"bad axis {fieldspec!r}") from None
    missing = {"m", "k", "n", "b", "t"} - set(axes)
    if missing:
        raise TableError(f"axes line missing {sorted(missing)}")
    table = TuneTable(l1, l2, axes["m"], axes["k"], axes["n"], axes["b"], axes["t"])
    table.version = version
    for ln in lines[3:]:
        parts = ln.split()
        if len(parts) != 6:
            raise TableError(f"bad entry line {ln!r}")
        try:
            m, k, n, b, t = (int(x) for x in parts[:5])
            sec = float(parts[5])
        except ValueError:
            raise TableError(f"bad entry line {ln!r}") from None
        for v, axis in ((m, table.m_axis), (k, table.k_axis), (n, table.n_axis),
                        (b, table.b_axis), (t, table.t_axis)):
            if v not in axis:
                raise TableError(f"entry {ln!r} is off the declared axes")
        table.entries[(m, k, n, b, t)] = sec
    table.check()
    return table


def load_table(path: str) -> TuneTable:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise TableError(f"cannot read tune table {path!r}: {e}") from None
    return loads_table(text)


# ---------------------------------------------------------------------------
# interpolation


def _axis_position(axis: Sequence[int], q: float) -> tuple[int, float, bool]:
    """Index-space coordinate of q on a log2-uniform axis.

    Returns (lo, frac, clamped_below): the value lives between axis[lo]
    and axis[lo+1] at fraction frac.  Below the axis it clamps (frac 0);
    above it the fraction extends past 1, which linearly extrapolates
    from the last two points.
    """
    n = len(axis)
    if n == 1:
        return 0, 0.0, q < axis[0]
    if q <= axis[0]:
        return 0, 0.0, q < axis[0]
    lq = math.log2(q)
    if q >= axis[-1]:
        lo = n - 2
        step = math.log2(axis[-1]) - math.log2(axis[-2])
        return lo, (lq - math.log2(axis[-2])) / step, False
    for i in range(n - 1):
        if axis[i] <= q <= axis[i + 1]:
            step = math.log2(axis[i + 1]) - math.log2(axis[i])
            return i, (lq - math.log2(axis[i])) / step, False
    raise AssertionError("axis scan fell through")


def _entry(table: TuneTable, key: tuple[int, int, int, int, int]) -> float:
    val = table.entries.get(key)
    if val is not None:
        return val
    # hole in the table: fall back to the nearest calibrated b at this point
    m, k, n, b, t = key
    candidates = [
        (abs(math.log2(bb) - math.log2(b)), bb)
        for bb in table.b_axis
        if (m, k, n, bb, t) in table.entries
    ]
    if candidates:
        _, bb = min(candidates)
        return table.entries[(m, k, n, bb, t)]
    raise TableError(f"no calibrated entry near {key}")


def estimate_time(table: TuneTable, m: int, k: int, n: int, b: float, t: float) -> float:
    """Predicted seconds for one blocked matmul at the given parameters.

    Multilinear in log2-space over (m, k, n, b); the thread axis blends the
    two neighbouring calibrated counts linearly.  Exact grid points return
    the stored value.
    """
    if not table.entries:
        raise TableError("empty tune table")
    axes = (table.m_axis, table.k_axis, table.n_axis, table.b_axis)
    coords = [_axis_position(ax, q) for ax, q in zip(axes, (m, k, n, b))]
    tl, tf, _ = _axis_position(table.t_axis, t)
    t_pairs = [(table.t_axis[tl], 1.0 - tf)]
    if tf != 0.0 and tl + 1 < len(table.t_axis):
        # linear blend in the thread count itself
        t0v, t1v = table.t_axis[tl], table.t_axis[tl + 1]
        w1 = (t - t0v) / (t1v - t0v)
        t_pairs = [(t0v, 1.0 - w1), (t1v, w1)]
    total = 0.0
    for corner in range(16):
        w = 1.0
        key = []
        for d in range(4):
            lo, frac, _ = coords[d]
            hi_side = (corner >> d) & 1
            axis = axes[d]
            if hi_side:
                w *= frac
                key.append(axis[min(lo + 1, len(axis) - 1)])
            else:
                w *= 1.0 - frac
                key.append(axis[lo])
        if w == 0.0:
            continue
        for tv, tw in t_pairs:
            if tw == 0.0:
                continue
            total += w * tw * _entry(table, (key[0], key[1], key[2], key[3], tv))
    return max(total, 1e-12)


def query_clamped(table: TuneTable, m: int, k: int, n: int) -> bool:
    return any(
        _axis_position(ax, q)[2]
        for ax, q in ((table.m_axis, m), (table.k_axis, k), (table.n_axis, n))
    )


# ---------------------------------------------------------------------------
# joint selection


def collect_queries(g: ExecutionGraph) -> list[TuneQuery]:
    """Matmul-family work in the iteration body, one query per node.

    Sparse operands are modelled as dense work on the equivalent nonzero
    dimensions: block-list weights query per-field dims times the field
    count; coordinate patterns scale the dense query by the fill ratio.
    """
    queries: list[TuneQuery] = []
    for nid, n in g.nodes.items():
        if nid in g.preamble or n.kind not in MATMUL_KINDS:
            continue
        a_shape = g.value_shape(n.inputs[0])
        if n.kind in (OpKind.MATMUL, OpKind.MULT_BIAS_SIGM, OpKind.MATMUL_TRANSPOSE_RIGHT):
            m, kk = a_shape.rows, a_shape.cols
        else:  # A^T forms
            m, kk = a_shape.cols, a_shape.rows
        nn = n.out_shape.cols
        weight = 1.0
        sparse_pat = None
        sparse_shape = None
        for i in n.inputs[:2]:
            pat = g.value_pattern(i)
            if not isinstance(pat, Dense):
                sparse_pat = pat
                sparse_shape = g.value_shape(i)
        if n.kind is OpKind.MASKED_MATMUL and n.mask is not None and not isinstance(n.mask, Dense):
            sparse_pat = n.mask
            sparse_shape = n.out_shape
        if isinstance(sparse_pat, BlockList) and sparse_pat.blocks:
            fh = int(np.mean([blk.height for blk in sparse_pat.blocks]))
            fw = int(np.mean([blk.width for blk in sparse_pat.blocks]))
            queries.append(TuneQuery(m, max(fh, 1), max(fw, 1), float(len(sparse_pat.blocks))))
            continue
        if isinstance(sparse_pat, Coord):
            weight = max(sparse_pat.fill(sparse_shape), 1e-3)
        queries.append(TuneQuery(m, kk, nn, weight))
    return queries


def select_params(table: TuneTable, queries: list[TuneQuery]) -> Selection:
    """Exhaustive scan over the calibrated (b, t) grid; ties prefer fewer
    threads, then smaller blocks."""
    if not queries:
        raise TableError("no tuning queries supplied")
    if not table.entries:
        raise TableError("empty tune table")
    best: Optional[tuple[float, int, int]] = None
    for t in table.t_axis:
        for b in table.b_axis:
            total = 0.0
            for q in queries:
                total += q.weight * estimate_time(table, q.m, q.k, q.n, b, t)
            cand = (total, t, b)
            if best is None or cand < best:
                best = cand
    total, t, b = best
    clamped = any(query_clamped(table, q.m, q.k, q.n) for q in queries)
    return Selection(block_size=b, threads=t, predicted_seconds=total, clamped=clamped)


def forced_selection(b: int, t: int) -> Selection:
    """A selection fixed by hand (ablations, experiments, tests)."""
    return Selection(block_size=int(b), threads=int(t), predicted_seconds=float("nan"), clamped=False)
