from typing import Any, Dict, Optional, Sequence


class MarginKDError(Exception):
    """Base class for every error raised by marginkd."""


class ContractError(MarginKDError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, message: str, shapes: Optional[Sequence[Sequence[int]]] = None):
        self.shapes = [tuple(s) for s in shapes] if shapes else []
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class ClassIndexError(MarginKDError, IndexError):
    """A class label lies outside {0..c-1}."""


class NumericError(MarginKDError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class DegenerateEmbeddingError(NumericError):
    """A row could not be L2-normalized because its norm is zero."""


class GenerationError(MarginKDError):
    """The synthetic generator could not satisfy the requested separations."""


class ConfigError(MarginKDError, ValueError):
    """Configuration is invalid or inconsistent with the data it is applied to."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, components: Dict[str, Any]):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        parts = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")
