"""Exception hierarchy shared by every mgtlab module."""


class MGTLabError(Exception):
    """Base class for all errors raised by mgtlab."""


class DimensionError(MGTLabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MGTLabError):
    """A call violated an operation's precondition."""


class NumericalError(MGTLabError, ArithmeticError):
    """Non-finite values, non-convergence, or internal inconsistency."""

    def __init__(self, message, layer=None, residual=None):
        super().__init__(message)
        self.layer = layer
        self.residual = residual


class DegenerateInputError(MGTLabError, ValueError):
    """Input lies outside the domain where the quantity is defined (zero vector, all-zero matrix)."""


class InvalidConfigurationError(MGTLabError, ValueError):
    """An experiment or model configuration is inconsistent."""


class IngestionError(MGTLabError, OSError):
    """A corpus file could not be read or is unusable."""


class ConfigParseError(InvalidConfigurationError):
    """A config file or override failed to parse; ``key`` names the offender."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class TrainingAbort(NumericalError):
    """Training hit a non-finite gradient or loss and was stopped."""

    def __init__(self, message, param=None, layer=None, step=None):
        super().__init__(message, layer=layer)
        self.param = param
        self.step = step
