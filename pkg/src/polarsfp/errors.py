"""Exception types shared across the package."""


class PolarSfPError(Exception):
    """Base class for all package errors."""


class DomainError(PolarSfPError, ValueError):
    pass


class DegenerateSampling(PolarSfPError, ValueError):
    pass


class ZeroIntensity(PolarSfPError, ValueError):
    pass


class OutOfRange(PolarSfPError, ValueError):
    pass


class EmptyMask(PolarSfPError):
    pass


class EmptyIntersection(PolarSfPError):
    pass


class InsufficientViews(PolarSfPError):
    pass


class SchemaError(PolarSfPError, ValueError):
    """Scene document failed validation.

    ``path`` holds the dotted location of the offending field.
    """

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MalformedHeader(PolarSfPError, ValueError):
    pass


class TruncatedData(PolarSfPError, ValueError):
    pass


class NegativeClamp(UserWarning):
    """Noise drove a fitted minimum intensity below zero; it was clamped."""
