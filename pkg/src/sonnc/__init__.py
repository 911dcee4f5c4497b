"""Statically optimizing compiler and parallel executor for
fixed-architecture neural-network training loops."""

__version__ = "0.1.0"

from .errors import (
    ExecutionError,
    GraphError,
    PatternError,
    ShapeError,
    SonncError,
    StorageError,
    TableError,
)
from .graph import (
    Block,
    BlockList,
    Coord,
    Dense,
    ExecutionGraph,
    GraphBuilder,
    OpKind,
    Role,
    Shape,
    VarKind,
    validate,
)
from .api import compile_plan, run_document

__all__ = [
    "Block", "BlockList", "Coord", "Dense", "ExecutionGraph", "GraphBuilder",
    "OpKind", "Role", "Shape", "VarKind", "validate",
    "compile_plan", "run_document",
    "SonncError", "GraphError", "ShapeError", "PatternError", "StorageError",
    "TableError", "ExecutionError",
]
