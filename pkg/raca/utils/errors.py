"""Exception hierarchy for raca.

The CLI maps ConfigError and missing inputs to exit code 2 and every other
RacaError to exit code 1.
"""

from typing import Optional, Sequence


class RacaError(Exception):
    """Base class for all raca errors."""


class DimensionError(RacaError, ValueError):
    """Tensor or feature shapes do not line up."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            rendered = " vs ".join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class NumericDomainError(RacaError, ArithmeticError):
    """A kernel produced or received non-finite values."""


class ContractError(RacaError):
    """A caller violated an operation's precondition."""


class TrainingDivergenceError(RacaError):
    """Training produced NaN gradients or losses."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        super().__init__(message)
        self.parameter = parameter


class ConfigError(RacaError, ValueError):
    """Invalid run or arena configuration."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(RacaError):
    """A checkpoint file could not be read."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointChecksumError(CheckpointError):
    """The checkpoint is truncated or corrupted."""
