"""Exception hierarchy shared by every dmcr2 module."""


class Dmcr2Error(Exception):
    """Base class for all library errors."""


class NotPositiveDefinite(Dmcr2Error, ValueError):
    pass


class NoConvergence(Dmcr2Error, RuntimeError):
    pass


class EmptyClass(Dmcr2Error, ValueError):
    pass


class MissingStat(Dmcr2Error, KeyError):
    def __init__(self, sender, key, round_=None, receiver=None):
        self.sender = sender
        self.key = key
        self.round = round_
        self.receiver = receiver
        super().__init__(
            f"missing stat from sender={sender!r} key={key!r} round={round_!r}"
            + (f" at receiver={receiver!r}" if receiver is not None else "")
        )

    def __str__(self):
        return self.args[0]


class PlanMismatch(Dmcr2Error, ValueError):
    pass


class ShapeMismatch(Dmcr2Error, ValueError):
    pass


class BadArch(Dmcr2Error, ValueError):
    pass


class ArchMismatch(Dmcr2Error, ValueError):
    pass


class Unconnectable(Dmcr2Error, RuntimeError):
    pass


class UnknownRecipient(Dmcr2Error, KeyError):
    pass


class ClassMismatch(Dmcr2Error, ValueError):
    pass


class AssumptionViolated(Dmcr2Error, ValueError):
    pass


class UncoverableLabel(Dmcr2Error, ValueError):
    pass


class ZeroVariance(Dmcr2Error, ValueError):
    pass


class BadDims(Dmcr2Error, ValueError):
    pass


class InsufficientSamples(Dmcr2Error, ValueError):
    pass


class IdxError(Dmcr2Error, ValueError):
    """Base class for malformed IDX input."""


class BadMagic(IdxError):
    pass


class TypeUnsupported(IdxError):
    pass


class TruncatedPayload(IdxError):
    pass


class ConfigError(Dmcr2Error):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        super().__init__(message)


class ValidationError(ConfigError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
