class QSAError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(QSAError, ValueError):
    """Qubit counts or vector lengths disagree."""


class CapacityError(QSAError, ValueError):
    """A dense or simulated object would exceed the configured size limit."""


class ValidationError(QSAError, ValueError):
    """An input violates a documented precondition."""
