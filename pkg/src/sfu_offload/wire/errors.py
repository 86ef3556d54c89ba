class WireError(ValueError):
    """Base class for wire-format errors."""


class TruncatedHeader(WireError):
    pass


class DepthExceeded(WireError):
    pass


class MalformedExtension(WireError):
    pass


class FieldOverflow(WireError):
    pass


class NotAv1Extension(WireError):
    pass


class MalformedDescriptor(WireError):
    pass


class TruncatedCompound(WireError):
    pass


class MalformedStun(WireError):
    pass


class UnknownPacketType(UserWarning):
    """Emitted (as a warning) when an RTCP packet type is skipped."""
