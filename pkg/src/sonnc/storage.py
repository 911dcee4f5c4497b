"""Physical matrix storage: formats, parameterization, packing.

Four concrete layouts back the two high-level matrix kinds:

* DenseBlocked      - dense payload, logically partitioned into b x b tiles
* LocallyDense      - list of rectangular dense fields inside a sparse matrix
* GeneralSparseCSB  - per-block sorted coordinate lists (compressed sparse blocks)
* HybridCSB         - per block, either a dense tile or a coordinate list

The block is the unit of thread work and of disjoint concurrent writes.
For dense payloads the tiling is logical: the payload is one contiguous
array (row- or column-major per the layout decision) and tiles are views
into it, which keeps small-matrix math on the BLAS fast path while
preserving the tile-granular write protocol.  Trailing partial blocks
keep their true (smaller) dimensions.

Packing and unpacking move values without performing any floating-point
arithmetic, so the round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

import numpy as np

from .errors import StorageError
from .graph import BlockList, Coord, Dense, Pattern, Shape

FIELD_DIM_THRESHOLD = 5   # fields smaller than this go to the general sparse format
HYBRID_DENSE_FILL = 0.5   # in-block fill at or above which a hybrid block is dense


class Format(str, Enum):
    DENSE_BLOCKED = "DenseBlocked"
    LOCALLY_DENSE = "LocallyDense"
    GENERAL_SPARSE_CSB = "GeneralSparseCSB"
    HYBRID_CSB = "HybridCSB"


class Layout(str, Enum):
    ROW_MAJOR = "row"
    COL_MAJOR = "col"


@dataclass(frozen=True)
class StorageDecision:
    var: str
    format: Format
    block_size: int
    layout: Layout = Layout.ROW_MAJOR

    def dump_line(self) -> str:
        return f"var={self.var} format={self.format.value} b={self.block_size} layout={self.layout.value}"


@dataclass
class LdField:
    row0: int
    col0: int
    data: np.ndarray  # (height, width)


@dataclass
class CsbBlock:
    rows: np.ndarray  # int64, in-block row indices
    cols: np.ndarray  # int64, in-block col indices
    vals: np.ndarray  # float64


@dataclass
class HybridDenseBlock:
    data: np.ndarray      # full tile, zeros off pattern
    rows: np.ndarray      # in-block pattern coordinates (bookkeeping)
    cols: np.ndarray


@dataclass
class StoredBlock:
    """One unit of stored data as seen by iterate_blocks and the executor.

    brow/bcol are grid indices for blocked formats and (field_index, 0)
    for LocallyDense fields; row0/col0 give the element offset either way.
    """

    brow: int
    bcol: int
    row0: int
    col0: int
    nrows: int
    ncols: int
    payload: Union[np.ndarray, CsbBlock, HybridDenseBlock]


@dataclass
class PackedMatrix:
    decision: StorageDecision
    shape: Shape
    pattern: Pattern
    data: Optional[np.ndarray] = None                 # DenseBlocked
    fields: list[LdField] = field(default_factory=list)  # LocallyDense
    blocks: dict = field(default_factory=dict)        # CSB / Hybrid: (bi,bj) -> block

    @property
    def block_size(self) -> int:
        return self.decision.block_size

    def grid(self) -> tuple[int, int]:
        b = self.block_size
        return (-(-self.shape.rows // b), -(-self.shape.cols // b))


def choose_format(pattern: Pattern, shape: Shape) -> Format:
    """Select the physical structure for a declared sparsity pattern.

    Small receptive fields pay too much per-field overhead in the locally
    dense structure, so block lists whose smallest field dimension is
    under the threshold use the general sparse format instead.
    """
    if isinstance(pattern, Dense):
        return Format.DENSE_BLOCKED
    if isinstance(pattern, BlockList):
        if pattern.min_field_dim() >= FIELD_DIM_THRESHOLD:
            return Format.LOCALLY_DENSE
        return Format.GENERAL_SPARSE_CSB
    if isinstance(pattern, Coord):
        if pattern.fill(shape) >= HYBRID_DENSE_FILL:
            return Format.HYBRID_CSB
        return Format.GENERAL_SPARSE_CSB
    raise StorageError(f"unknown pattern {pattern!r}")


def check_legal(fmt: Format, pattern: Pattern) -> None:
    if fmt is Format.DENSE_BLOCKED and not isinstance(pattern, Dense):
        raise StorageError("DenseBlocked requires a Dense pattern")
    if fmt is Format.LOCALLY_DENSE and not isinstance(pattern, BlockList):
        raise StorageError("LocallyDense requires a BlockList pattern")
    if fmt in (Format.GENERAL_SPARSE_CSB, Format.HYBRID_CSB) and isinstance(pattern, Dense):
        raise StorageError(f"{fmt.value} requires a non-Dense pattern")


def _coords_of(pattern: Pattern, shape: Shape) -> np.ndarray:
    """Pattern positions as an (n, 2) row-major-sorted int array."""
    if isinstance(pattern, Coord):
        if not pattern.coords:
            return np.empty((0, 2), dtype=np.int64)
        return np.asarray(pattern.coords, dtype=np.int64)
    if isinstance(pattern, BlockList):
        parts = []
        for blk in pattern.blocks:
            rr, cc = np.meshgrid(
                np.arange(blk.row0, blk.row0 + blk.height),
                np.arange(blk.col0, blk.col0 + blk.width),
                indexing="ij",
            )
            parts.append(np.stack([rr.ravel(), cc.ravel()], axis=1))
        if not parts:
            return np.empty((0, 2), dtype=np.int64)
        allc = np.concatenate(parts)
        order = np.lexsort((allc[:, 1], allc[:, 0]))
        return allc[order].astype(np.int64)
    raise StorageError("dense pattern has no coordinate list")


def pack(values: np.ndarray, pattern: Pattern, decision: StorageDecision) -> PackedMatrix:
    """Copy `values` into the physical layout; entries off the pattern are ignored."""
    check_legal(decision.format, pattern)
    values = np.asarray(values, dtype=np.float64)
    shape = Shape(values.shape[0], values.shape[1])
    b = decision.block_size
    if b < 1:
        raise StorageError(f"block size must be >= 1, got {b}")
    pm = PackedMatrix(decision, shape, pattern)

    if decision.format is Format.DENSE_BLOCKED:
        order = "C" if decision.layout is Layout.ROW_MAJOR else "F"
        pm.data = np.array(values, dtype=np.float64, order=order)
        return pm

    if decision.format is Format.LOCALLY_DENSE:
        order = "C" if decision.layout is Layout.ROW_MAJOR else "F"
        for blk in sorted(pattern.blocks, key=lambda x: (x.row0, x.col0)):
            sub = values[blk.row0 : blk.row0 + blk.height, blk.col0 : blk.col0 + blk.width]
            pm.fields.append(LdField(blk.row0, blk.col0, np.array(sub, dtype=np.float64, order=order)))
        return pm

    coords = _coords_of(pattern, shape)
    if coords.shape[0] == 0:
        return pm
    bi = coords[:, 0] // b
    bj = coords[:, 1] // b
    keys = np.stack([bi, bj], axis=1)
    order = np.lexsort((coords[:, 1], coords[:, 0], bj, bi))
    coords = coords[order]
    keys = keys[order]
    boundaries = np.nonzero(np.any(np.diff(keys, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(coords)]])
    for s, e in zip(starts, ends):
        kb, jb = int(keys[s, 0]), int(keys[s, 1])
        rr = coords[s:e, 0] - kb * b
        cc = coords[s:e, 1] - jb * b
        vv = values[coords[s:e, 0], coords[s:e, 1]].astype(np.float64)
        nrows = min(b, shape.rows - kb * b)
        ncols = min(b, shape.cols - jb * b)
        if decision.format is Format.HYBRID_CSB and len(rr) >= HYBRID_DENSE_FILL * nrows * ncols:
            tile = np.zeros((nrows, ncols), dtype=np.float64)
            tile[rr, cc] = vv
            pm.blocks[(kb, jb)] = HybridDenseBlock(tile, rr.copy(), cc.copy())
        else:
            pm.blocks[(kb, jb)] = CsbBlock(rr.copy(), cc.copy(), vv)
    return pm


def alloc_packed(shape: Shape, pattern: Pattern, decision: StorageDecision) -> PackedMatrix:
    """Allocate zeroed storage (used for node output buffers)."""
    return pack(np.zeros((shape.rows, shape.cols)), pattern, decision)


def unpack(pm: PackedMatrix) -> np.ndarray:
    """Materialize the full dense array; off-pattern entries are exactly 0."""
    out = np.zeros((pm.shape.rows, pm.shape.cols), dtype=np.float64)
    if pm.decision.format is Format.DENSE_BLOCKED:
        out[:, :] = pm.data
        return out
    if pm.decision.format is Format.LOCALLY_DENSE:
        for f in pm.fields:
            h, w = f.data.shape
            out[f.row0 : f.row0 + h, f.col0 : f.col0 + w] = f.data
        return out
    b = pm.block_size
    for (bi, bj), blk in pm.blocks.items():
        r0, c0 = bi * b, bj * b
        if isinstance(blk, HybridDenseBlock):
            h, w = blk.data.shape
            out[r0 : r0 + h, c0 : c0 + w] = blk.data
        else:
            out[r0 + blk.rows, c0 + blk.cols] = blk.vals
    return out


def iterate_blocks(pm: PackedMatrix) -> Iterator[StoredBlock]:
    """Stored blocks in deterministic block-row-major order.

    Sparse formats skip blocks with no stored entries; DenseBlocked yields
    every tile of the grid as a view into the payload.
    """
    b = pm.block_size
    if pm.decision.format is Format.DENSE_BLOCKED:
        nbr, nbc = pm.grid()
        for bi in range(nbr):
            for bj in range(nbc):
                r0, c0 = bi * b, bj * b
                view = pm.data[r0 : min(r0 + b, pm.shape.rows), c0 : min(c0 + b, pm.shape.cols)]
                yield StoredBlock(bi, bj, r0, c0, view.shape[0], view.shape[1], view)
        return
    if pm.decision.format is Format.LOCALLY_DENSE:
        for idx, f in enumerate(pm.fields):
            h, w = f.data.shape
            yield StoredBlock(idx, 0, f.row0, f.col0, h, w, f.data)
        return
    for (bi, bj) in sorted(pm.blocks):
        blk = pm.blocks[(bi, bj)]
        r0, c0 = bi * b, bj * b
        nrows = min(b, pm.shape.rows - r0)
        ncols = min(b, pm.shape.cols - c0)
        yield StoredBlock(bi, bj, r0, c0, nrows, ncols, blk)


def dense_tile(pm: PackedMatrix, bi: int, bj: int) -> np.ndarray:
    """View of tile (bi, bj) of a DenseBlocked payload."""
    b = pm.block_size
    r0, c0 = bi * b, bj * b
    return pm.data[r0 : min(r0 + b, pm.shape.rows), c0 : min(c0 + b, pm.shape.cols)]


def stored_value_count(pm: PackedMatrix) -> int:
    if pm.decision.format is Format.DENSE_BLOCKED:
        return pm.shape.rows * pm.shape.cols
    if pm.decision.format is Format.LOCALLY_DENSE:
        return sum(f.data.size for f in pm.fields)
    return sum(len(blk.rows) for blk in pm.blocks.values())
