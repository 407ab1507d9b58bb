"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A numerical routine produced or detected an unusable result."""


class ConvergenceError(NumericError):
    """An iterative method hit its iteration cap before converging."""

    def __init__(self, message, *, iterations=None, last_delta=None):
        super().__init__(message)
        self.iterations = iterations
        self.last_delta = last_delta


class SequenceLengthError(ValueError):
    """A token sequence does not fit the model's context window."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message, *, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
