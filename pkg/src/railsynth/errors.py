"""Exception hierarchy.

Every error raised by the package derives from :class:`RailSynthError` and
carries the offending value(s) as attributes so callers (and the CLI) can
report them without parsing messages.
"""


class RailSynthError(Exception):
    """Base class for all package errors."""

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def __getattr__(self, name):
        details = self.__dict__.get("details", {})
        if name in details:
            return details[name]
        raise AttributeError(name)


# dataset ingestion
class MissingMask(RailSynthError):
    def __init__(self, stem):
        super().__init__(f"no mask found for image stem {stem!r}", stem=stem)


class SizeMismatch(RailSynthError):
    pass


class InvalidCrop(RailSynthError):
    pass


class InvalidSize(RailSynthError):
    pass


class EmptyDataset(RailSynthError):
    pass


# conditioning
class InvalidThresholds(RailSynthError):
    pass


class InvalidInput(RailSynthError):
    pass


class UnknownScheme(RailSynthError):
    pass


# prompting
class CaptionerUnavailable(RailSynthError):
    pass


# diffusion / control branch
class InvalidSchedule(RailSynthError):
    pass


class ShapeError(RailSynthError):
    pass


class DivisionByZeroGuard(RailSynthError):
    pass


class NonFiniteLoss(RailSynthError):
    pass


class NonFiniteSample(RailSynthError):
    pass


class UnknownBlock(RailSynthError):
    pass


class MissingCondition(RailSynthError):
    pass


class HashMismatch(RailSynthError):
    pass


# metrics
class InsufficientSamples(RailSynthError):
    pass


class DimensionMismatch(RailSynthError):
    pass


class NumericalFailure(RailSynthError):
    pass


class InvalidMask(RailSynthError):
    pass


# segmentation
class UnknownClass(RailSynthError):
    pass


class AlignmentError(RailSynthError):
    pass


class LeakageError(RailSynthError):
    pass


# orchestration
class MissingArtifact(RailSynthError):
    pass


class ConfigError(RailSynthError):
    """Invalid or conflicting configuration; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}", field=field)
