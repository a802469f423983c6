"""Exception hierarchy shared by every subpackage."""

from __future__ import annotations


class PerfusionError(Exception):
    pass


class DimensionError(PerfusionError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(PerfusionError, ValueError):
    """Input is well-typed but mathematically unusable (empty set, zero norm, ...)."""


class ContractError(PerfusionError, RuntimeError):
    """A caller broke an operation's precondition."""


class NumericalError(PerfusionError, ArithmeticError):
    """NaN or Inf appeared in a forward or backward pass."""


class ConfigError(PerfusionError, ValueError):
    pass


class MissingArtifactError(PerfusionError, FileNotFoundError):
    pass
