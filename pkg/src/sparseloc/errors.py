"""Exception types shared across the package."""


class SparselocError(Exception):
    """Base class for all package errors."""


class EmptyInput(SparselocError):
    """An operation received an empty point cloud / tensor / database."""


class ShapeError(SparselocError):
    """Channel or dimension mismatch between operands."""


class StrideError(SparselocError):
    """Tensor stride incompatible with the requested operation."""


class FormatError(SparselocError):
    """On-disk file does not match the expected binary layout."""


class DatasetError(SparselocError):
    """Dataset cannot satisfy a sampling or protocol precondition."""


class TapeConsumed(SparselocError):
    """backward() called twice on the same tape."""


class NumericError(SparselocError):
    """Non-finite value encountered where finite math is required."""
