"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value. ``key`` names the offending config path."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class InputError(ValueError):
    """Malformed input data (token ids, files, empty datasets)."""


class StateError(RuntimeError):
    """An object was used in a state that does not support the operation."""


class RunError(RuntimeError):
    """Training run failure, e.g. a non-finite loss term."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class NumericalDegeneracyError(ArithmeticError):
    """Raised when a representation has zero norm and cosine similarity is undefined."""


class InvariantViolation(RuntimeError):
    """A frozen object was mutated."""
