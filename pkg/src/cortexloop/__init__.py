"""cortexloop: single-machine real-time biosignal streaming and closed-loop processing.

A ring-buffered TCP stream server, a typed client, synthetic/replay
acquisition sources, event-locked and sliding-window epoching with chained
concurrent processing stages, marker sinks, a headless frame-accurate
experiment scheduler, a band-power + LDA decoder, and a latency harness.
"""

from .errors import (
    CapacityError,
    ConnectCancelledError,
    CortexLoopError,
    DegenerateError,
    EmptyError,
    EndOfStreamError,
    EventOrderError,
    EvictedError,
    InvalidHeaderError,
    MalformedError,
    NoHeaderError,
    NotConnectedError,
    NotYetAvailableError,
    NyquistError,
    ProtocolError,
    ReplayFormatError,
    ShapeError,
)
from .ring import RingStore
from .types import DataKind, Epoch, Event, SampleBlock, StreamHeader

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ConnectCancelledError",
    "CortexLoopError",
    "DataKind",
    "DegenerateError",
    "EmptyError",
    "EndOfStreamError",
    "Epoch",
    "Event",
    "EventOrderError",
    "EvictedError",
    "InvalidHeaderError",
    "MalformedError",
    "NoHeaderError",
    "NotConnectedError",
    "NotYetAvailableError",
    "NyquistError",
    "ProtocolError",
    "ReplayFormatError",
    "RingStore",
    "SampleBlock",
    "ShapeError",
    "StreamHeader",
    "__version__",
]
