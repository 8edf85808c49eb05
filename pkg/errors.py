"""Exception hierarchy shared by every crossmotion module.

The CLI and the HTTP service map these categories onto exit codes and status codes,
so raise the most specific class that applies.
"""


class CrossMotionError(Exception):
    """Base class for all crossmotion failures."""


class InvalidInputError(CrossMotionError, ValueError):
    """Input violates a documented precondition (non-finite, negative, empty...)."""


class ShapeMismatchError(InvalidInputError):
    pass


class TooShortError(InvalidInputError):
    pass


class MappingIncompleteError(InvalidInputError):
    """A retarget map leaves a non-virtual unified joint without a source."""


class UnknownSpeciesError(InvalidInputError):
    pass


class ContainerError(CrossMotionError):
    """Binary file could not be parsed."""


class MagicMismatchError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class ConfigError(CrossMotionError):
    pass


class NumericError(CrossMotionError):
    """A numeric failure that aborts training; ``diagnostics`` says where."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NonFiniteLossError(NumericError):
    pass


class NonFiniteGradientError(NumericError):
    pass
