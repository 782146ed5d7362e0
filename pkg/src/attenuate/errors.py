"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""


class FormatError(EngineError):
    """Malformed file or wire payload. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedError(EngineError):
    """Well-formed input using a feature the engine does not implement."""


class ShapeError(EngineError):
    """Tensor or vector dimensions do not match the operation's contract."""


class NumericError(EngineError):
    """NaN/Inf encountered where finite values are required."""


class ConfigError(EngineError):
    """Invalid or inconsistent configuration."""


class TooShortError(EngineError):
    """Input audio shorter than the operation's minimum length."""


class NotFoundError(EngineError):
    """Lookup of a class id, profile, or resource failed."""


class TargetCapError(EngineError):
    """More simultaneous targets requested than the session supports."""


class EmptyTargetError(EngineError):
    """Fusion over an empty target set is undefined; callers bypass instead."""


class DegenerateSignalError(EngineError):
    """A signal with zero power where nonzero power is required."""


class SessionClosedError(EngineError):
    """Operation on a stream session that has been closed."""


class ProtocolError(EngineError):
    """Malformed control-service message."""
