"""Exception types shared across the toolkit.

Store-level errors map onto wire reason codes so that a client raises the
same exception class the server-side store would have raised locally.
"""

from __future__ import annotations


class CortexLoopError(Exception):
    """Base class for all cortexloop errors."""


# --- stream store -----------------------------------------------------------

class InvalidHeaderError(CortexLoopError):
    """Header rejected (zero channels, non-positive rate, bad labels)."""


class NoHeaderError(CortexLoopError):
    """Operation requires a header but none has been put."""


class EvictedError(CortexLoopError):
    """Requested range starts before the ring's eviction horizon."""


class NotYetAvailableError(CortexLoopError):
    """Requested range ends beyond the current stream head."""


class ShapeError(CortexLoopError):
    """Sample block shape or dtype does not match the stream header."""


class EventOrderError(CortexLoopError):
    """Event batch would violate non-decreasing sample order."""


# --- wire protocol ----------------------------------------------------------

class ProtocolError(CortexLoopError):
    """Base class for codec failures; decoding never raises anything else."""


class BadVersionError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    """Fewer bytes present than the message declares."""


class MalformedError(ProtocolError):
    """Payload bytes do not parse as the declared command."""


class ServerError(CortexLoopError):
    """Server signalled an internal failure (reason code 5)."""


# --- client -----------------------------------------------------------------

class NotConnectedError(CortexLoopError):
    """Client operation attempted before connect or after disconnect."""


class ConnectCancelledError(CortexLoopError):
    """connect_with_retry was cancelled before a connection succeeded."""

    def __init__(self, attempts: int):
        super().__init__(f"connect cancelled after {attempts} attempts")
        self.attempts = attempts


# --- acquisition / file formats ---------------------------------------------

class ReplayFormatError(CortexLoopError):
    """Replay file is corrupt, truncated, or not a replay file."""


class EpochFileError(CortexLoopError):
    """Epoch file is corrupt, truncated, or not an epoch file."""


class ModelFileError(CortexLoopError):
    """Model file is corrupt, truncated, or not a model file."""


# --- epoching pipeline ------------------------------------------------------

class EmptyError(CortexLoopError):
    """read_epoch called before any epoch was produced."""


class EndOfStreamError(CortexLoopError):
    """Stage has terminated and holds nothing left to read."""


class CapacityError(CortexLoopError):
    """Retained-epoch cap exceeded on a retain-all stage."""


# --- markers ----------------------------------------------------------------

class SinkClosedError(CortexLoopError):
    """send() on a closed marker sink."""


class MarkerRangeError(CortexLoopError):
    """Marker value outside the 8-bit range 0..255."""


# --- scheduler --------------------------------------------------------------

class SequenceConsumedError(CortexLoopError):
    """A task-looping sequence cannot be re-run after its task finished."""


class ShuffleExhaustedError(CortexLoopError):
    """shuffle_until gave up before the predicate was satisfied."""


# --- decoding ---------------------------------------------------------------

class DegenerateError(CortexLoopError):
    """Training data cannot support a model fit (missing class, too few epochs)."""


class NyquistError(CortexLoopError):
    """Filter band edge at or above the Nyquist frequency."""


# Wire reason codes carried by error responses.
REASON_NO_HEADER = 1
REASON_EVICTED = 2
REASON_NOT_YET_AVAILABLE = 3
REASON_MALFORMED = 4
REASON_INTERNAL = 5

_REASON_TO_ERROR = {
    REASON_NO_HEADER: NoHeaderError,
    REASON_EVICTED: EvictedError,
    REASON_NOT_YET_AVAILABLE: NotYetAvailableError,
    REASON_MALFORMED: MalformedError,
    REASON_INTERNAL: ServerError,
}


def reason_for_exception(exc: Exception) -> int:
    """Reason code a server should report for a store/codec exception."""
    if isinstance(exc, NoHeaderError):
        return REASON_NO_HEADER
    if isinstance(exc, EvictedError):
        return REASON_EVICTED
    if isinstance(exc, NotYetAvailableError):
        return REASON_NOT_YET_AVAILABLE
    if isinstance(exc, (InvalidHeaderError, ShapeError, EventOrderError,
                        ProtocolError, ValueError)):
        return REASON_MALFORMED
    return REASON_INTERNAL


def error_for_reason(reason: int, context: str = "") -> CortexLoopError:
    """Client-side exception for a wire reason code."""
    cls = _REASON_TO_ERROR.get(reason, ServerError)
    msg = f"server error (reason={reason})"
    if context:
        msg = f"{context}: {msg}"
    return cls(msg)
