from __future__ import annotations

from typing import Optional


class BlockOptError(Exception):
    """Root of every error raised by async_blockopt."""


class LayoutError(BlockOptError, ValueError):
    pass


class DimensionError(BlockOptError, ValueError):
    pass


class NonFiniteError(BlockOptError, ValueError):
    pass


class RegularizationError(BlockOptError, ValueError):
    pass


class FeasibilityError(BlockOptError, ValueError):
    pass


class PreconditionError(BlockOptError, ValueError):
    pass


class MalformedLogError(BlockOptError, ValueError):
    pass


class RoutingError(BlockOptError, ValueError):
    pass


class ConfigError(BlockOptError, ValueError):
    pass


class ReportError(BlockOptError, RuntimeError):
    pass


class ConvergenceError(BlockOptError, RuntimeError):
    """Iteration cap reached before the stopping test passed."""

    def __init__(self, message: str, *, residual: float, iterations: int, last: Optional[object] = None) -> None:
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations
        self.last = last
