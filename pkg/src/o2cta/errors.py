"""Exception hierarchy shared by all o2cta modules."""


class O2CTAError(Exception):
    """Base class for every error raised by the package."""


# volio
class SizeMismatch(O2CTAError):
    pass


class CorruptData(O2CTAError):
    pass


class UnsupportedFormat(O2CTAError):
    pass


class MalformedLabels(O2CTAError):
    pass


class UnknownClass(O2CTAError):
    pass


class NoReferences(O2CTAError):
    pass


class NonMonotoneReferences(O2CTAError):
    pass


class InvalidValue(O2CTAError):
    """A constructor argument violates a type invariant."""


# mprrec
class StepTooLarge(O2CTAError):
    pass


class DegenerateCenterline(O2CTAError):
    pass


# align
class InvalidThickness(O2CTAError):
    pass


class DegenerateInterval(O2CTAError):
    pass


class UnalignableGeometry(O2CTAError):
    pass


class EmptySegment(O2CTAError):
    pass


# dataset
class EmptyInput(O2CTAError):
    pass


class TooNarrow(O2CTAError):
    pass


class InsufficientPatients(O2CTAError):
    pass


# nn / model
class ShapeError(O2CTAError):
    pass


class StaleGraph(O2CTAError):
    pass


class ScheduleExhausted(O2CTAError):
    pass


class EmptySequence(O2CTAError):
    pass


class DivergenceDetected(O2CTAError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IncompatibleCheckpoint(O2CTAError):
    pass


# metrics
class LengthMismatch(O2CTAError):
    pass


class UndefinedAUC(O2CTAError):
    pass


class DegenerateMarginals(O2CTAError):
    pass


# synth / cli
class InvalidSpec(O2CTAError):
    pass


class ConfigError(O2CTAError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
