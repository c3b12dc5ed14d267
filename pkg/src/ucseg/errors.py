"""Exception types raised across the package."""


class UCSegError(Exception):
    """Base class for all package errors."""


class ConfigError(UCSegError, ValueError):
    pass


class ShapeError(UCSegError, ValueError):
    pass


class NumericInputError(UCSegError, ValueError):
    pass


class DomainError(UCSegError, ValueError):
    pass


class EmptyBankError(UCSegError):
    """Raised when a feature bank cannot supply the keys a loss needs."""


class NonFiniteLossError(UCSegError, FloatingPointError):
    def __init__(self, term, value=None):
        self.term = term
        msg = f"non-finite loss term '{term}'"
        if value is not None:
            msg += f" (value={value})"
        super().__init__(msg)


class EmptyReportError(UCSegError, ValueError):
    pass


class CheckpointError(UCSegError):
    pass


class DatasetError(UCSegError):
    pass
