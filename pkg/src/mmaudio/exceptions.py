"""Exception hierarchy shared across the package."""


class MMAudioError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MMAudioError, ValueError):
    pass


class InvalidShapeError(MMAudioError, ValueError):
    pass


class InvalidConfigError(MMAudioError, ValueError):
    pass


class SpecError(InvalidConfigError):
    """A network description cannot be realized (e.g. a layer yields a non-positive dim)."""


class DataIntegrityError(MMAudioError, ValueError):
    pass


class UndefinedMetricError(MMAudioError, ValueError):
    pass


class NonFiniteError(MMAudioError, FloatingPointError):
    """Raised when an activation, gradient or loss stops being finite."""

    def __init__(self, message, layer=None, batch=None):
        super().__init__(message)
        self.layer = layer
        self.batch = batch
