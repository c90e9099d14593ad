"""Exception hierarchy shared by every module in the package."""


class BilateralError(Exception):
    """Base class for all package errors."""


class MissingReceiveTime(BilateralError, ValueError):
    """A provider-clock operation met a record without a receive time."""


class NegativeTT(BilateralError, ValueError):
    """A request was received before it was issued."""


class EmptyInput(BilateralError, ValueError):
    """An aggregate was requested over no records."""


class InvalidSignature(BilateralError):
    """An envelope failed signature or reference validation."""


class CounterViolation(BilateralError):
    """A negotiation message carried an unexpected round counter."""


class EncodingError(BilateralError, ValueError):
    """Bytes could not be decoded under the canonical encoding."""


class ScenarioError(BilateralError, ValueError):
    """A scenario file or scenario value is malformed."""
