"""
Exception hierarchy for the layered VAE package
"""

from typing import Optional, Sequence


class CstvaeError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(CstvaeError, ValueError):
    """Shapes, axes or extents do not fit together"""


class DomainError(CstvaeError, ArithmeticError):
    """A numeric operation left its mathematical domain (log of <= 0, division by 0)"""


class ContractError(CstvaeError, ValueError):
    """A documented precondition was violated by the caller"""


class ConfigError(CstvaeError, ValueError):
    """Invalid configuration, model kind mismatch or degenerate labels"""


class SingularTransformError(CstvaeError):
    def __init__(self, det, rows: Optional[Sequence[int]] = None):
        self.det = det
        self.rows = list(rows) if rows is not None else []
        super().__init__(f"near-singular affine transform (det={det}, rows={self.rows})")


class FormatError(CstvaeError, ValueError):
    def __init__(self, message: str, offset: int = 0, path: str = ""):
        self.offset = offset
        self.path = path
        where = f"{path}@{offset}" if path else f"offset {offset}"
        super().__init__(f"{message} ({where})")


class DivergenceError(CstvaeError):
    def __init__(self, parameter: str, step: int = -1, checkpoint: Optional[str] = None):
        self.parameter = parameter
        self.step = step
        # newest checkpoint written before the failure, if any
        self.checkpoint = checkpoint
        super().__init__(f"non-finite value in '{parameter}' at step {step}")
