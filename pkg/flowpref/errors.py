"""Exception hierarchy for flowpref."""

from typing import Optional


class FlowprefError(Exception):
    """Base class for every error raised by flowpref."""


class ConfigurationError(FlowprefError, ValueError):
    """Invalid configuration value or dataset spec."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class InputError(FlowprefError, ValueError):
    """Invalid argument passed to an operation."""


class AlignmentError(InputError):
    """Lyric alignment could not be made strictly increasing within range."""


class ContractViolation(FlowprefError, ValueError):
    """Array shapes disagree with what an operation requires."""


class NumericalError(FlowprefError, ArithmeticError):
    """A loss or state became non-finite."""

    def __init__(
        self,
        message: str,
        batch_index: Optional[int] = None,
        step: Optional[int] = None,
        seed: Optional[int] = None,
    ):
        self.batch_index = batch_index
        self.step = step
        self.seed = seed
        details = [
            f"{name}={value}"
            for name, value in (
                ("batch_index", batch_index),
                ("step", step),
                ("seed", seed),
            )
            if value is not None
        ]
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class ScoringError(FlowprefError):
    """A scorer failed on a sample."""


class PersistenceError(FlowprefError, IOError):
    """A binary artifact is malformed, truncated or from another version."""
