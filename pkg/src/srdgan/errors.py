class SRDGANError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class NotFound(SRDGANError, FileNotFoundError):
    category = "not_found"


class FormatError(SRDGANError, ValueError):
    category = "format"


class DimensionError(SRDGANError, ValueError):
    category = "dimension"


class StateError(SRDGANError, ValueError):
    category = "state"


class SpecError(SRDGANError, ValueError):
    category = "spec"


class ArgumentError(SRDGANError, ValueError):
    category = "argument"


class ValidationError(SRDGANError, ValueError):
    """Carries the offending items (paths, file names) in ``items``."""

    category = "validation"

    def __init__(self, message: str, items=()):
        super().__init__(message)
        self.items = list(items)


class NumericError(SRDGANError, ArithmeticError):
    category = "numeric"

    def __init__(self, message: str, iteration: int | None = None, parameter: str | None = None):
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if parameter is not None:
            parts.append(f"parameter={parameter}")
        super().__init__(" ".join(parts))
        self.iteration = iteration
        self.parameter = parameter
