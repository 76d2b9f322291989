"""
Pure Python Kron-LoRA (klora): parameter-efficient adapters for frozen linear
layers, their analytic gradients, a toy training harness and a CLI.

Three adapter families are supported:

- LoRA: ΔW = up · down
- KronA: ΔW = A ⊗ B
- Kron-LoRA: ΔW = A ⊗ (B1 · B2)
"""

__version__ = "0.1.0"


class KronLoRAException(Exception):
    """
    Base class for every error raised by this package.
    """


class ShapeError(KronLoRAException, ValueError):
    """Operands have incompatible shapes."""


class PlanningError(KronLoRAException, ValueError):
    """No valid adapter shapes exist for the requested layer."""


class ConfigError(KronLoRAException, ValueError):
    """A configuration value is missing or out of range."""


class StateError(KronLoRAException, RuntimeError):
    """An operation was called in the wrong order, e.g. backward without forward."""


class DivergenceError(KronLoRAException, ArithmeticError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(KronLoRAException, ValueError):
    """The bytes are not a checkpoint written by this package."""


class CheckpointCorruptionError(KronLoRAException, ValueError):
    """The checkpoint header or payload is inconsistent or truncated."""
