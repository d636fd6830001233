"""Exception hierarchy shared across the package."""


class PanError(Exception):
    """Base class for every error raised by panalloc."""


# catalog / domain model
class ParseError(PanError):
    pass


class MissingEntry(PanError):
    pass


class UnknownTransport(PanError):
    pass


class UnsupportedFunction(PanError):
    pass


class UnknownReference(PanError):
    pass


# allocator
class EmptyCandidates(PanError):
    pass


class InfeasibleRequest(PanError):
    pass


class TooLarge(PanError):
    pass


# protocol
class ProtocolError(PanError):
    pass


class FieldOverflow(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class TrailingBytes(ProtocolError):
    pass


class InvalidEnum(ProtocolError):
    pass


# simulator
class InvalidScenario(PanError):
    pass
