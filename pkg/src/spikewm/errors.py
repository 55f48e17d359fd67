"""Exception types shared across the package."""


class ContractError(ValueError):
    """Shapes or arguments violate an operation's preconditions."""


class ParameterError(ValueError):
    """A neuron or model parameter is outside its valid range."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value)."""


class FormatError(ValueError):
    """A binary file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
