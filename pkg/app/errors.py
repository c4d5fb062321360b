"""
Error types shared by every module of the stylization pipeline
"""
from typing import Optional


class StylizeError(Exception):
    """Base class for all errors raised by the package"""


class ShapeError(StylizeError, ValueError):
    """A tensor or image dimension does not match what an operation requires"""

    def __init__(self, dimension: str, expected, actual, op: str = ""):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        self.op = op
        prefix = f"{op}: " if op else ""
        super().__init__(f"{prefix}{dimension} mismatch (expected {expected}, got {actual})")


class ConfigError(StylizeError):
    """Invalid or malformed configuration"""


class CheckpointError(StylizeError):
    """Unreadable, truncated, or version-incompatible checkpoint file"""


class DatasetError(StylizeError):
    """Missing or malformed dataset files"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{message}: {path}" if path else message)


class RankDeficiencyError(StylizeError):
    """The quadratic basis Gram matrix is singular for the given pixels"""

    def __init__(self, rank: int, message: str = ""):
        self.rank = rank
        super().__init__(
            message
            or f"basis Gram matrix has rank {rank} < 10; the input colors do not span the quadratic basis"
        )
