"""Numerical kernels dispatched by the executor.

Every kernel computes one output block of one graph node.  Dense tile
math goes through BLAS on array views; coordinate-list (CSB) work goes
through compiled loops.  Kernels write only their declared output block,
so any number may run concurrently on disjoint blocks.

Accumulation order is fixed (ascending k-blocks, coordinate order within
blocks), which makes a given plan bitwise reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .errors import ExecutionError, StorageError
from .graph import ChainStep, OpKind, Pattern, Shape
from .storage import (
    CsbBlock,
    Format,
    HybridDenseBlock,
    LdField,
    PackedMatrix,
    dense_tile,
)


@dataclass
class KernelTask:
    """One unit of thread work: a node's kernel applied to one output block.

    `key` addresses the output block: a (bi, bj) grid pair for blocked
    payloads, a field index for LocallyDense outputs, or a column-block
    index for row reductions.  Scalar parameters (shrink threshold, the
    fused elementwise program) ride along resolved at plan time.
    """

    node_id: str
    kind: OpKind
    input_ids: tuple[str, ...]
    out_id: str
    key: Union[tuple[int, int], int, None]
    theta: Optional[float] = None
    program: Optional[tuple[ChainStep, ...]] = None


# ---------------------------------------------------------------------------
# scalar / elementwise primitives


def sigmoid_inplace(x: np.ndarray) -> None:
    """Numerically stable logistic: branches on sign so exp never overflows."""
    neg = x < 0.0
    z = np.exp(np.negative(np.abs(x)))
    np.divide(z, 1.0 + z, out=x)
    np.subtract(1.0, x, out=x, where=~neg)


def soft_shrink_into(x: np.ndarray, theta: float, out: np.ndarray) -> None:
    """h_theta(x) = sign(x) * max(|x| - theta, 0)."""
    sign = np.sign(x)
    np.abs(x, out=out)
    out -= theta
    np.maximum(out, 0.0, out=out)
    out *= sign


def scalar_value(pm: PackedMatrix) -> float:
    if pm.shape != Shape(1, 1):
        raise ExecutionError(f"expected scalar buffer, got {pm.shape}")
    return float(pm.data[0, 0])


# ---------------------------------------------------------------------------
# compiled coordinate loops (strided views are fine; loops keep fixed order)


@njit(cache=True, nogil=True)
def _csb_right_acc(A, rows, cols, vals, acc):  # acc[:, c] += v * A[:, r]
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        v = vals[t]
        for i in range(acc.shape[0]):
            acc[i, c] += v * A[i, r]


@njit(cache=True, nogil=True)
def _csb_left_acc(rows, cols, vals, B, acc):  # acc[r, :] += v * B[c, :]
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        v = vals[t]
        for j in range(acc.shape[1]):
            acc[r, j] += v * B[c, j]


@njit(cache=True, nogil=True)
def _csb_tml_acc(rows, cols, vals, B, acc):  # acc[c, :] += v * B[r, :]  (A^T side)
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        v = vals[t]
        for j in range(acc.shape[1]):
            acc[c, j] += v * B[r, j]


@njit(cache=True, nogil=True)
def _csb_mtr_acc(A, rows, cols, vals, acc):  # acc[:, r] += v * A[:, c]  (B^T side)
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        v = vals[t]
        for i in range(acc.shape[0]):
            acc[i, r] += v * A[i, c]


@njit(cache=True, nogil=True)
def _masked_dots(A, B, rows, cols, out_vals):  # out[t] = sum_j A[j, r] * B[j, c]
    k = A.shape[0]
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        s = 0.0
        for j in range(k):
            s += A[j, r] * B[j, c]
        out_vals[t] = s


def warm_compiled_kernels() -> None:
    """Force-compile the coordinate kernels (first use is otherwise slow)."""
    a = np.zeros((2, 2))
    idx = np.zeros(1, dtype=np.int64)
    v = np.zeros(1)
    acc = np.zeros((2, 2))
    _csb_right_acc(a, idx, idx, v, acc)
    _csb_left_acc(idx, idx, v, a, acc)
    _csb_tml_acc(idx, idx, v, a, acc)
    _csb_mtr_acc(a, idx, idx, v, acc)
    _masked_dots(a, a, idx, idx, v)


# ---------------------------------------------------------------------------
# tile access helpers


def read_tile(pm: PackedMatrix, r0: int, c0: int, nrows: int, ncols: int) -> np.ndarray:
    """Dense view/copy of an arbitrary rectangle (copy for sparse formats)."""
    if pm.decision.format is Format.DENSE_BLOCKED:
        return pm.data[r0 : r0 + nrows, c0 : c0 + ncols]
    out = np.zeros((nrows, ncols), dtype=np.float64)
    if pm.decision.format is Format.LOCALLY_DENSE:
        for f in pm.fields:
            h, w = f.data.shape
            ri0, ri1 = max(r0, f.row0), min(r0 + nrows, f.row0 + h)
            ci0, ci1 = max(c0, f.col0), min(c0 + ncols, f.col0 + w)
            if ri0 < ri1 and ci0 < ci1:
                out[ri0 - r0 : ri1 - r0, ci0 - c0 : ci1 - c0] = f.data[
                    ri0 - f.row0 : ri1 - f.row0, ci0 - f.col0 : ci1 - f.col0
                ]
        return out
    b = pm.block_size
    for (bi, bj), blk in pm.blocks.items():
        br0, bc0 = bi * b, bj * b
        h = min(b, pm.shape.rows - br0)
        w = min(b, pm.shape.cols - bc0)
        if br0 >= r0 + nrows or br0 + h <= r0 or bc0 >= c0 + ncols or bc0 + w <= c0:
            continue
        if isinstance(blk, HybridDenseBlock):
            ri0, ri1 = max(r0, br0), min(r0 + nrows, br0 + h)
            ci0, ci1 = max(c0, bc0), min(c0 + ncols, bc0 + w)
            out[ri0 - r0 : ri1 - r0, ci0 - c0 : ci1 - c0] = blk.data[
                ri0 - br0 : ri1 - br0, ci0 - bc0 : ci1 - bc0
            ]
        else:
            rr = blk.rows + br0
            cc = blk.cols + bc0
            keep = (rr >= r0) & (rr < r0 + nrows) & (cc >= c0) & (cc < c0 + ncols)
            out[rr[keep] - r0, cc[keep] - c0] = blk.vals[keep]
    return out


def _out_region(out: PackedMatrix, key) -> tuple[int, int, int, int]:
    """(r0, c0, nrows, ncols) of the output block addressed by `key`."""
    if out.decision.format is Format.LOCALLY_DENSE:
        f = out.fields[key]
        h, w = f.data.shape
        return f.row0, f.col0, h, w
    bi, bj = key
    b = out.block_size
    r0, c0 = bi * b, bj * b
    return r0, c0, min(b, out.shape.rows - r0), min(b, out.shape.cols - c0)


def _write_dense_block(out: PackedMatrix, key, value: np.ndarray) -> None:
    if out.decision.format is Format.DENSE_BLOCKED:
        bi, bj = key
        dense_tile(out, bi, bj)[:, :] = value
    elif out.decision.format is Format.LOCALLY_DENSE:
        out.fields[key].data[:, :] = value
    else:
        raise StorageError("dense block write on coordinate storage")


# ---------------------------------------------------------------------------
# matmul-family accumulation (shared by MatMul / TML / MTR / MultBiasSigm)


def _k_blocks(dim: int, b: int) -> range:
    return range(-(-dim // b))


def _acc_matmul(kind: OpKind, a: PackedMatrix, bmat: PackedMatrix, r0, c0, nrows, ncols) -> np.ndarray:
    """Accumulate one output rectangle of a matmul-family op, ascending in k."""
    acc = np.zeros((nrows, ncols), dtype=np.float64)
    b = a.block_size
    if kind in (OpKind.MATMUL, OpKind.MULT_BIAS_SIGM):
        kdim = a.shape.cols
        for kb in _k_blocks(kdim, b):
            k0 = kb * b
            kk = min(b, kdim - k0)
            _acc_product(acc, a, (r0, k0, nrows, kk), bmat, (k0, c0, kk, ncols), "NN")
    elif kind in (OpKind.TRANSPOSE_MATMUL_LEFT, OpKind.MASKED_MATMUL):
        kdim = a.shape.rows
        for kb in _k_blocks(kdim, b):
            k0 = kb * b
            kk = min(b, kdim - k0)
            _acc_product(acc, a, (k0, r0, kk, nrows), bmat, (k0, c0, kk, ncols), "TN")
    elif kind is OpKind.MATMUL_TRANSPOSE_RIGHT:
        kdim = a.shape.cols
        for kb in _k_blocks(kdim, b):
            k0 = kb * b
            kk = min(b, kdim - k0)
            _acc_product(acc, a, (r0, k0, nrows, kk), bmat, (c0, k0, ncols, kk), "NT")
    else:
        raise ExecutionError(f"not a matmul kind: {kind}")
    return acc


def _acc_product(acc, a: PackedMatrix, a_rect, bmat: PackedMatrix, b_rect, mode: str) -> None:
    """acc += op(A[a_rect]) . op(B[b_rect]) with sparse-aware dispatch."""
    afmt, bfmt = a.decision.format, bmat.decision.format
    ar0, ac0, anr, anc = a_rect
    br0, bc0, bnr, bnc = b_rect

    if mode == "NN" and bfmt in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and afmt is Format.DENSE_BLOCKED:
        bb = bmat.block_size
        blk = bmat.blocks.get((br0 // bb, bc0 // bb))
        if blk is None:
            return
        av = a.data[ar0 : ar0 + anr, ac0 : ac0 + anc]
        if isinstance(blk, HybridDenseBlock):
            acc += av @ blk.data
        else:
            _csb_right_acc(av, blk.rows, blk.cols, blk.vals, acc)
        return
    if mode == "NN" and afmt in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and bfmt is Format.DENSE_BLOCKED:
        ab = a.block_size
        blk = a.blocks.get((ar0 // ab, ac0 // ab))
        if blk is None:
            return
        bv = bmat.data[br0 : br0 + bnr, bc0 : bc0 + bnc]
        if isinstance(blk, HybridDenseBlock):
            acc += blk.data @ bv
        else:
            _csb_left_acc(blk.rows, blk.cols, blk.vals, bv, acc)
        return
    if mode == "TN" and afmt in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and bfmt is Format.DENSE_BLOCKED:
        ab = a.block_size
        blk = a.blocks.get((ar0 // ab, ac0 // ab))
        if blk is None:
            return
        bv = bmat.data[br0 : br0 + bnr, bc0 : bc0 + bnc]
        if isinstance(blk, HybridDenseBlock):
            acc += blk.data.T @ bv
        else:
            _csb_tml_acc(blk.rows, blk.cols, blk.vals, bv, acc)
        return
    if mode == "NT" and bfmt in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and afmt is Format.DENSE_BLOCKED:
        bb = bmat.block_size
        blk = bmat.blocks.get((br0 // bb, bc0 // bb))
        if blk is None:
            return
        av = a.data[ar0 : ar0 + anr, ac0 : ac0 + anc]
        if isinstance(blk, HybridDenseBlock):
            acc += av @ blk.data.T
        else:
            _csb_mtr_acc(av, blk.rows, blk.cols, blk.vals, acc)
        return

    if mode == "NN" and bfmt is Format.LOCALLY_DENSE and afmt is Format.DENSE_BLOCKED:
        # fields of B intersecting rows [br0, br0+bnr) and cols [bc0, bc0+bnc)
        for f in bmat.fields:
            h, w = f.data.shape
            ri0, ri1 = max(br0, f.row0), min(br0 + bnr, f.row0 + h)
            ci0, ci1 = max(bc0, f.col0), min(bc0 + bnc, f.col0 + w)
            if ri0 >= ri1 or ci0 >= ci1:
                continue
            av = a.data[ar0 : ar0 + anr, ac0 + (ri0 - br0) : ac0 + (ri1 - br0)]
            fv = f.data[ri0 - f.row0 : ri1 - f.row0, ci0 - f.col0 : ci1 - f.col0]
            acc[:, ci0 - bc0 : ci1 - bc0] += av @ fv
        return
    if mode == "TN" and afmt is Format.LOCALLY_DENSE and bfmt is Format.DENSE_BLOCKED:
        # A^T: fields of A with rows in [ar0, ar0+anr) (k-range) and cols in
        # [ac0, ac0+anc) (output-row range)
        for f in a.fields:
            h, w = f.data.shape
            ri0, ri1 = max(ar0, f.row0), min(ar0 + anr, f.row0 + h)
            ci0, ci1 = max(ac0, f.col0), min(ac0 + anc, f.col0 + w)
            if ri0 >= ri1 or ci0 >= ci1:
                continue
            fv = f.data[ri0 - f.row0 : ri1 - f.row0, ci0 - f.col0 : ci1 - f.col0]
            bv = bmat.data[br0 + (ri0 - ar0) : br0 + (ri1 - ar0), bc0 : bc0 + bnc]
            acc[ci0 - ac0 : ci1 - ac0, :] += fv.T @ bv
        return
    if mode == "NT" and bfmt is Format.LOCALLY_DENSE and afmt is Format.DENSE_BLOCKED:
        # B^T: fields of B with rows in [br0, br0+bnr) (output-col range) and
        # cols in [bc0, bc0+bnc) (k-range)
        for f in bmat.fields:
            h, w = f.data.shape
            ri0, ri1 = max(br0, f.row0), min(br0 + bnr, f.row0 + h)
            ci0, ci1 = max(bc0, f.col0), min(bc0 + bnc, f.col0 + w)
            if ri0 >= ri1 or ci0 >= ci1:
                continue
            av = a.data[ar0 : ar0 + anr, ac0 + (ci0 - bc0) : ac0 + (ci1 - bc0)]
            fv = f.data[ri0 - f.row0 : ri1 - f.row0, ci0 - f.col0 : ci1 - f.col0]
            acc[:, ri0 - br0 : ri1 - br0] += av @ fv.T
        return

    # dense x dense, and any remaining combination via dense materialization
    av = read_tile(a, ar0, ac0, anr, anc)
    bv = read_tile(bmat, br0, bc0, bnr, bnc)
    if mode == "NN":
        acc += av @ bv
    elif mode == "TN":
        acc += av.T @ bv
    else:
        acc += av @ bv.T


# ---------------------------------------------------------------------------
# per-block operand resolution for elementwise work


def _operand_for_block(pm: PackedMatrix, out: PackedMatrix, key) -> Union[float, np.ndarray, CsbBlock, HybridDenseBlock]:
    if pm.shape.is_scalar:
        return scalar_value(pm)
    r0, c0, nrows, ncols = _out_region(out, key)
    if out.decision.format in (Format.DENSE_BLOCKED, Format.LOCALLY_DENSE):
        return read_tile(pm, r0, c0, nrows, ncols)
    # coordinate-storage output: operands reduce to aligned value arrays
    blk_out = out.blocks[key]
    if pm.decision.format in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and pm.block_size == out.block_size:
        blk = pm.blocks.get(key)
        if blk is not None:
            if isinstance(blk_out, HybridDenseBlock) and isinstance(blk, HybridDenseBlock):
                return blk.data
            if isinstance(blk_out, CsbBlock) and isinstance(blk, CsbBlock) and len(blk.rows) == len(blk_out.rows):
                if np.array_equal(blk.rows, blk_out.rows) and np.array_equal(blk.cols, blk_out.cols):
                    return blk.vals
        tile = read_tile(pm, r0, c0, nrows, ncols)
    else:
        tile = read_tile(pm, r0, c0, nrows, ncols)
    if isinstance(blk_out, HybridDenseBlock):
        return tile
    return tile[blk_out.rows, blk_out.cols]


def _out_array_for_block(out: PackedMatrix, key) -> np.ndarray:
    fmt = out.decision.format
    if fmt is Format.DENSE_BLOCKED:
        return dense_tile(out, key[0], key[1])
    if fmt is Format.LOCALLY_DENSE:
        return out.fields[key].data
    blk = out.blocks[key]
    if isinstance(blk, HybridDenseBlock):
        return blk.data
    return blk.vals


def _apply_elem(kind: OpKind, ops: list, out_arr: np.ndarray, theta: Optional[float]) -> None:
    if kind is OpKind.ADD:
        np.add(ops[0], ops[1], out=out_arr)
    elif kind is OpKind.SUB:
        np.subtract(ops[0], ops[1], out=out_arr)
    elif kind is OpKind.MUL_ELEM:
        np.multiply(ops[0], ops[1], out=out_arr)
    elif kind is OpKind.SCALE_BY_SCALAR:
        np.multiply(ops[0], ops[1], out=out_arr)
    elif kind is OpKind.SQUARE:
        np.multiply(ops[0], ops[0], out=out_arr)
    elif kind is OpKind.ABS:
        np.abs(ops[0], out=out_arr)
    elif kind is OpKind.SIGMOID:
        if out_arr is not ops[0]:
            np.copyto(out_arr, ops[0])
        sigmoid_inplace(out_arr)
    elif kind is OpKind.SOFT_SHRINK:
        soft_shrink_into(np.asarray(ops[0], dtype=np.float64), float(theta), out_arr)
    else:
        raise ExecutionError(f"not an elementwise kind: {kind}")


# ---------------------------------------------------------------------------
# task entry point


def execute(task: KernelTask, buffers: dict[str, PackedMatrix]) -> None:
    kind = task.kind
    ins = [buffers[i] for i in task.input_ids]
    out = buffers[task.out_id]

    if kind in (OpKind.MATMUL, OpKind.TRANSPOSE_MATMUL_LEFT, OpKind.MATMUL_TRANSPOSE_RIGHT):
        r0, c0, nrows, ncols = _out_region(out, task.key)
        acc = _acc_matmul(kind, ins[0], ins[1], r0, c0, nrows, ncols)
        _write_dense_block(out, task.key, acc)
        return

    if kind is OpKind.MULT_BIAS_SIGM:
        r0, c0, nrows, ncols = _out_region(out, task.key)
        acc = _acc_matmul(kind, ins[0], ins[1], r0, c0, nrows, ncols)
        bias = ins[2]
        acc += bias.data[0, c0 : c0 + ncols]
        sigmoid_inplace(acc)   # epilogue applied while the block is cache-resident
        _write_dense_block(out, task.key, acc)
        return

    if kind is OpKind.MASKED_MATMUL:
        _masked_matmul_block(ins[0], ins[1], out, task.key)
        return

    if kind is OpKind.TRANSPOSE:
        r0, c0, nrows, ncols = _out_region(out, task.key)
        tile = read_tile(ins[0], c0, r0, ncols, nrows)
        _write_dense_block(out, task.key, tile.T)
        return

    if kind is OpKind.BIAS_ADD_ROW:
        r0, c0, nrows, ncols = _out_region(out, task.key)
        tile = read_tile(ins[0], r0, c0, nrows, ncols)
        out_arr = _out_array_for_block(out, task.key)
        np.add(tile, ins[1].data[0, c0 : c0 + ncols], out=out_arr)
        return

    if kind in (OpKind.ADD, OpKind.SUB, OpKind.MUL_ELEM, OpKind.SCALE_BY_SCALAR,
                OpKind.SQUARE, OpKind.ABS, OpKind.SIGMOID, OpKind.SOFT_SHRINK):
        ops = [_operand_for_block(pm, out, task.key) for pm in ins]
        out_arr = _out_array_for_block(out, task.key)
        _apply_elem(kind, ops, out_arr, task.theta)
        return

    if kind is OpKind.ELEM_CHAIN:
        ops = [_operand_for_block(pm, out, task.key) for pm in ins]
        out_arr = _out_array_for_block(out, task.key)
        temps: list[np.ndarray] = []
        n_steps = len(task.program)
        for si, step in enumerate(task.program):
            args = [ops[i] if src == "in" else temps[i] for (src, i) in step.args]
            if si == n_steps - 1:
                dst = out_arr
            else:
                dst = np.empty_like(out_arr)
            _apply_elem(step.kind, args, dst, step.theta)
            temps.append(dst)
        return

    if kind is OpKind.SUM_ROWS:
        _sum_rows_block(ins[0], out, task.key)
        return

    if kind is OpKind.SUM_ALL:
        out.data[0, 0] = _sum_all(ins[0])
        return

    if kind is OpKind.SUB_SQ_SUM:
        out.data[0, 0] = _sub_sq_sum(ins[0], ins[1])
        return

    raise ExecutionError(f"no kernel for op kind {kind}")


# ---------------------------------------------------------------------------
# masked matmul


def _masked_matmul_block(a: PackedMatrix, bmat: PackedMatrix, out: PackedMatrix, key) -> None:
    fmt = out.decision.format
    if fmt is Format.DENSE_BLOCKED:
        r0, c0, nrows, ncols = _out_region(out, key)
        acc = _acc_matmul(OpKind.MASKED_MATMUL, a, bmat, r0, c0, nrows, ncols)
        _write_dense_block(out, key, acc)
        return
    if fmt is Format.LOCALLY_DENSE:
        f = out.fields[key]
        h, w = f.data.shape
        acc = _acc_matmul(OpKind.MASKED_MATMUL, a, bmat, f.row0, f.col0, h, w)
        f.data[:, :] = acc
        return
    blk = out.blocks[key]
    b = out.block_size
    bi, bj = key
    r_base, c_base = bi * b, bj * b
    av = a.data if a.decision.format is Format.DENSE_BLOCKED else read_tile(a, 0, 0, a.shape.rows, a.shape.cols)
    bv = bmat.data if bmat.decision.format is Format.DENSE_BLOCKED else read_tile(bmat, 0, 0, bmat.shape.rows, bmat.shape.cols)
    rows = blk.rows + r_base
    cols = blk.cols + c_base
    if isinstance(blk, HybridDenseBlock):
        vals = np.empty(len(rows), dtype=np.float64)
        _masked_dots(av, bv, rows.astype(np.int64), cols.astype(np.int64), vals)
        blk.data[blk.rows, blk.cols] = vals  # off-pattern slots stay exactly 0
    else:
        _masked_dots(av, bv, rows.astype(np.int64), cols.astype(np.int64), blk.vals)


# ---------------------------------------------------------------------------
# reductions (single task per output element group; fixed visit order)


def _sum_rows_block(x: PackedMatrix, out: PackedMatrix, key) -> None:
    bi, bj = key
    b = out.block_size
    c0 = bj * b
    ncols = min(b, out.shape.cols - c0)
    acc = np.zeros(ncols, dtype=np.float64)
    fmt = x.decision.format
    if fmt is Format.DENSE_BLOCKED:
        xb = x.block_size
        for rb in _k_blocks(x.shape.rows, xb):
            r0 = rb * xb
            nr = min(xb, x.shape.rows - r0)
            acc += x.data[r0 : r0 + nr, c0 : c0 + ncols].sum(axis=0)
    elif fmt is Format.LOCALLY_DENSE:
        for f in x.fields:
            h, w = f.data.shape
            ci0, ci1 = max(c0, f.col0), min(c0 + ncols, f.col0 + w)
            if ci0 < ci1:
                acc[ci0 - c0 : ci1 - c0] += f.data[:, ci0 - f.col0 : ci1 - f.col0].sum(axis=0)
    else:
        xb = x.block_size
        for (rb, cb) in sorted(x.blocks):
            bc0 = cb * xb
            w = min(xb, x.shape.cols - bc0)
            if bc0 >= c0 + ncols or bc0 + w <= c0:
                continue
            blk = x.blocks[(rb, cb)]
            if isinstance(blk, HybridDenseBlock):
                ci0, ci1 = max(c0, bc0), min(c0 + ncols, bc0 + w)
                acc[ci0 - c0 : ci1 - c0] += blk.data[:, ci0 - bc0 : ci1 - bc0].sum(axis=0)
            else:
                cc = blk.cols + bc0
                keep = (cc >= c0) & (cc < c0 + ncols)
                np.add.at(acc, cc[keep] - c0, blk.vals[keep])
    out.data[0, c0 : c0 + ncols] = acc


def _sum_all(x: PackedMatrix) -> float:
    fmt = x.decision.format
    total = 0.0
    if fmt is Format.DENSE_BLOCKED:
        b = x.block_size
        for rb in _k_blocks(x.shape.rows, b):
            for cb in _k_blocks(x.shape.cols, b):
                total += float(dense_tile(x, rb, cb).sum())
    elif fmt is Format.LOCALLY_DENSE:
        for f in x.fields:
            total += float(f.data.sum())
    else:
        for k in sorted(x.blocks):
            blk = x.blocks[k]
            total += float(blk.data.sum()) if isinstance(blk, HybridDenseBlock) else float(blk.vals.sum())
    return total


def _sub_sq_sum(a: PackedMatrix, bm: PackedMatrix) -> float:
    total = 0.0
    if a.decision.format is Format.DENSE_BLOCKED and bm.decision.format is Format.DENSE_BLOCKED:
        b = a.block_size
        for rb in _k_blocks(a.shape.rows, b):
            for cb in _k_blocks(a.shape.cols, b):
                d = dense_tile(a, rb, cb) - dense_tile(bm, rb, cb)
                np.multiply(d, d, out=d)
                total += float(d.sum())
        return total
    b = a.block_size
    for rb in _k_blocks(a.shape.rows, b):
        for cb in _k_blocks(a.shape.cols, b):
            r0, c0 = rb * b, cb * b
            nr = min(b, a.shape.rows - r0)
            nc = min(b, a.shape.cols - c0)
            d = read_tile(a, r0, c0, nr, nc) - read_tile(bm, r0, c0, nr, nc)
            np.multiply(d, d, out=d)
            total += float(d.sum())
    return total
