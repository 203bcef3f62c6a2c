"""Exception hierarchy shared by every layer of the lab.

Each error also derives from the closest builtin so callers may catch either.
"""
from typing import Optional


class FocusLabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FocusLabError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(FocusLabError, ValueError):
    """An attention row has no unmasked key."""


class NumericalError(FocusLabError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class UsageError(FocusLabError, RuntimeError):
    """An API was called outside its contract."""


class TapeError(UsageError):
    """Illegal tape operation (cross-tape edge, recording on a frozen tape)."""


class ConfigError(FocusLabError, ValueError):
    """A configuration value is invalid."""


class InputError(FocusLabError, ValueError):
    """Model input is out of range."""


class TaskError(FocusLabError, ValueError):
    """A sample or metric request is not well-formed for the task."""


class OptimizerStateError(FocusLabError, ValueError):
    """Optimizer state does not match the parameters it is applied to."""


class StepAbortedError(FocusLabError, RuntimeError):
    """A training step hit a non-finite loss and was aborted (never retried)."""

    def __init__(self, step: int, phase: str, diagnostic: str, cause: Optional[BaseException] = None):
        self.step = step
        self.phase = phase
        self.diagnostic = diagnostic
        self.cause = cause
        super().__init__(f"Step {step} aborted during {phase} loop: {diagnostic}")
