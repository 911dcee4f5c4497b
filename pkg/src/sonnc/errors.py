"""Exception hierarchy shared across the compiler and runtime."""


class SonncError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(SonncError):
    """Invalid graph construction: bad shapes, patterns, bindings, or document."""


class ShapeError(GraphError):
    """Operand shapes do not conform to the operation."""


class PatternError(GraphError):
    """Sparsity pattern is malformed or incompatible."""


class StorageError(SonncError):
    """Illegal format/pattern pairing or packing failure."""


class TableError(SonncError):
    """Tune table is missing, malformed, or version-incompatible."""


class ExecutionError(SonncError):
    """Runtime failure while executing a plan (e.g. non-finite cost)."""
