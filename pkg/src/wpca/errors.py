"""Exception hierarchy shared by all modules."""


class WpcaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(WpcaError, ValueError):
    """Operand shapes are incompatible."""


class InputError(WpcaError, ValueError):
    """Caller-supplied data violates a precondition."""


class ContractError(WpcaError, RuntimeError):
    """An API was used out of order or with the wrong kind of object."""


class CodecError(WpcaError, ValueError):
    """A genome or descriptor cannot be encoded/decoded."""


class ConfigurationError(WpcaError):
    """The requested configuration is infeasible (e.g. no genome fits the cap)."""


class DatasetError(WpcaError):
    """A ranking dataset is malformed or too many records failed."""

    def __init__(self, message, lineno=None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


class NumericError(WpcaError, ArithmeticError):
    """An iterative numeric routine failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual
