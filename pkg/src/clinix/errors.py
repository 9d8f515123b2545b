"""Exception types shared across the package."""


class ClinixError(Exception):
    """Base class for all package errors."""


class ShapeError(ClinixError, ValueError):
    pass


class ConstructionError(ClinixError, ValueError):
    """Tensor built from mismatched or non-finite values."""


class ConfigurationError(ClinixError, ValueError):
    pass


class ContractError(ClinixError, RuntimeError):
    """A documented precondition was violated by the caller."""


class StateError(ClinixError, RuntimeError):
    pass


class OracleError(ClinixError, ArithmeticError):
    pass


class PlanError(ConfigurationError):
    pass


class BuildError(ConfigurationError):
    pass


class DataError(ClinixError, ValueError):
    pass


class GenerationError(ClinixError, RuntimeError):
    pass


class FormatError(ClinixError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ClinixError, RuntimeError):
    pass
