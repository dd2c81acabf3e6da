"""Exception hierarchy shared by every vitapes module."""


class VitapesError(Exception):
    """Base class for all package errors."""


class ConfigError(VitapesError, ValueError):
    """Invalid configuration value or missing required field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(VitapesError, ValueError):
    pass


class NumericError(VitapesError, ArithmeticError):
    """Non-finite values, failed decompositions, overflow."""


class SplitError(VitapesError, ValueError):
    pass


class DataError(VitapesError, ValueError):
    pass


class ObjectiveError(VitapesError, ValueError):
    pass


class AuditError(VitapesError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InversionUnsupportedError(VitapesError):
    """The head is not square / not full rank, so no explicit inverse exists."""


class InvariantViolationError(VitapesError, AssertionError):
    """A frozen-parameter or structural invariant was broken."""


class FormatError(VitapesError, ValueError):
    """Malformed binary container (dataset dump or checkpoint)."""
