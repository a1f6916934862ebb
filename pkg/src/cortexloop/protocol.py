"""Binary request/response framing between buffer clients and the server.

Every message is an 8-byte little-endian header ``version u16 (=1),
command u16, payload_size u32`` followed by exactly ``payload_size``
payload bytes.  The normative byte layouts live in ``docs/protocol.md``;
this module is their executable form.  Decoding arbitrary bytes raises
``ProtocolError`` subclasses and never reads past the declared payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadVersionError,
    MalformedError,
    TruncatedError,
)
from .types import DataKind, Event

VERSION = 1
FRAME_SIZE = 8
MAX_PAYLOAD_BYTES = 1 << 28  # server-side sanity cap, not a wire constant

# Command codes (stable across releases).
PUT_HDR = 0x101
PUT_DAT = 0x102
PUT_EVT = 0x103
RESP_OK = 0x104
RESP_ERR = 0x105
GET_HDR = 0x201
GET_DAT = 0x202
GET_EVT = 0x203
FLUSH = 0x301
WAIT_DAT = 0x402

REQUEST_COMMANDS = frozenset(
    {PUT_HDR, PUT_DAT, PUT_EVT, GET_HDR, GET_DAT, GET_EVT, FLUSH, WAIT_DAT})

# WAIT_DAT threshold meaning "ignore this counter".
WAIT_IGNORE = 0xFFFFFFFFFFFFFFFF

_HDR = struct.Struct("<HHI")
_U32MAX = 0xFFFFFFFF


# --- message types ----------------------------------------------------------

@dataclass(frozen=True)
class GetHeader:
    pass


@dataclass(frozen=True)
class Flush:
    pass


@dataclass
class PutHeader:
    n_channels: int
    sampling_rate_hz: float
    data_kind: DataKind = DataKind.float32
    channel_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        # Rates travel as f32; normalize so encode/decode round-trips exactly.
        self.sampling_rate_hz = float(np.float32(self.sampling_rate_hz))
        self.data_kind = DataKind(self.data_kind)
        if self.channel_labels is not None:
            self.channel_labels = tuple(self.channel_labels)


@dataclass(eq=False)
class PutData:
    data: np.ndarray  # (n_samples, n_channels), dtype one of DataKind

    def __eq__(self, other):
        if not isinstance(other, PutData):
            return NotImplemented
        return _array_eq(self.data, other.data)


@dataclass
class PutEvents:
    events: tuple[Event, ...]

    def __post_init__(self):
        self.events = tuple(self.events)


@dataclass(frozen=True)
class GetData:
    begin: int
    end: int


@dataclass(frozen=True)
class GetEvents:
    begin: int
    end: int


@dataclass(frozen=True)
class WaitData:
    min_samples: int | None
    min_events: int | None
    timeout_ms: int


@dataclass(frozen=True)
class OkResponse:
    pass


@dataclass(frozen=True)
class ErrorResponse:
    reason: int


@dataclass
class HeaderResponse:
    n_channels: int
    sampling_rate_hz: float
    data_kind: DataKind
    channel_labels: tuple[str, ...] | None
    n_samples: int
    n_events: int

    def __post_init__(self):
        self.sampling_rate_hz = float(np.float32(self.sampling_rate_hz))
        self.data_kind = DataKind(self.data_kind)
        if self.channel_labels is not None:
            self.channel_labels = tuple(self.channel_labels)


@dataclass(eq=False)
class DataResponse:
    data: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, DataResponse):
            return NotImplemented
        return _array_eq(self.data, other.data)


@dataclass
class EventsResponse:
    events: tuple[Event, ...]

    def __post_init__(self):
        self.events = tuple(self.events)


@dataclass(frozen=True)
class WaitResponse:
    n_samples: int
    n_events: int


def _array_eq(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and bool(np.array_equal(a, b))


# --- encoding ---------------------------------------------------------------

def _frame(command: int, payload: bytes) -> bytes:
    return _HDR.pack(VERSION, command, len(payload)) + payload


def _encode_header_payload(n_channels, sampling_rate_hz, data_kind, labels,
                           n_samples=0, n_events=0) -> bytes:
    chunk = b""
    if labels:
        chunk = b"\x00".join(lbl.encode("utf-8") for lbl in labels)
    return struct.pack(
        "<IIIfII",
        n_channels,
        min(n_samples, _U32MAX),
        min(n_events, _U32MAX),
        sampling_rate_hz,
        int(data_kind),
        len(chunk),
    ) + chunk


def _encode_data_payload(data: np.ndarray) -> bytes:
    kind = DataKind.from_dtype(data.dtype)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"data must be (n_samples>=1, n_channels>=1), got {data.shape}")
    head = struct.pack("<IIII", data.shape[1], data.shape[0], int(kind), 0)
    return head + np.ascontiguousarray(data).tobytes()


def _encode_events_payload(events) -> bytes:
    parts = []
    for ev in events:
        kind = ev.kind.encode("utf-8")
        parts.append(struct.pack(
            "<IiQiI", len(kind), ev.value, ev.sample, ev.offset_samples,
            ev.duration_samples))
        parts.append(kind)
    return b"".join(parts)


def encode(msg) -> bytes:
    """Serialize any request or response message to wire bytes."""
    if isinstance(msg, GetHeader):
        return _frame(GET_HDR, b"")
    if isinstance(msg, Flush):
        return _frame(FLUSH, b"")
    if isinstance(msg, PutHeader):
        return _frame(PUT_HDR, _encode_header_payload(
            msg.n_channels, msg.sampling_rate_hz, msg.data_kind, msg.channel_labels))
    if isinstance(msg, PutData):
        return _frame(PUT_DAT, _encode_data_payload(msg.data))
    if isinstance(msg, PutEvents):
        return _frame(PUT_EVT, _encode_events_payload(msg.events))
    if isinstance(msg, GetData):
        return _frame(GET_DAT, struct.pack("<QQ", msg.begin, msg.end))
    if isinstance(msg, GetEvents):
        return _frame(GET_EVT, struct.pack("<QQ", msg.begin, msg.end))
    if isinstance(msg, WaitData):
        ms = WAIT_IGNORE if msg.min_samples is None else msg.min_samples
        me = WAIT_IGNORE if msg.min_events is None else msg.min_events
        return _frame(WAIT_DAT, struct.pack("<QQI", ms, me, msg.timeout_ms))
    if isinstance(msg, OkResponse):
        return _frame(RESP_OK, b"")
    if isinstance(msg, ErrorResponse):
        return _frame(RESP_ERR, struct.pack("<I", msg.reason))
    if isinstance(msg, HeaderResponse):
        return _frame(RESP_OK, _encode_header_payload(
            msg.n_channels, msg.sampling_rate_hz, msg.data_kind, msg.channel_labels,
            msg.n_samples, msg.n_events))
    if isinstance(msg, DataResponse):
        return _frame(RESP_OK, _encode_data_payload(msg.data))
    if isinstance(msg, EventsResponse):
        return _frame(RESP_OK, _encode_events_payload(msg.events))
    if isinstance(msg, WaitResponse):
        return _frame(RESP_OK, struct.pack("<QQ", msg.n_samples, msg.n_events))
    raise TypeError(f"cannot encode {type(msg).__name__}")


# --- decoding ---------------------------------------------------------------

class _Reader:
    """Bounds-checked cursor over a payload; never reads past the end."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedError(
                f"payload needs {n} more bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedError(f"{len(self.buf) - self.pos} trailing payload bytes")


def parse_frame_header(raw: bytes) -> tuple[int, int]:
    """Parse the fixed 8-byte header; returns (command, payload_size)."""
    if len(raw) < FRAME_SIZE:
        raise TruncatedError(f"message header needs 8 bytes, got {len(raw)}")
    version, command, size = _HDR.unpack(raw[:FRAME_SIZE])
    if version != VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    return command, size


def _split(raw: bytes) -> tuple[int, _Reader]:
    command, size = parse_frame_header(raw)
    body = raw[FRAME_SIZE:]
    if len(body) < size:
        raise TruncatedError(f"payload declares {size} bytes, got {len(body)}")
    if len(body) > size:
        raise MalformedError(f"{len(body) - size} bytes beyond declared payload")
    return command, _Reader(body)


def _decode_kind(code: int) -> DataKind:
    try:
        return DataKind(code)
    except ValueError:
        raise MalformedError(f"unknown data kind {code}") from None


def _decode_header_payload(r: _Reader):
    n_channels, n_samples, n_events, rate, kind_code, extra = r.unpack("<IIIfII")
    kind = _decode_kind(kind_code)
    if n_channels < 1:
        raise MalformedError("header with zero channels")
    if not rate > 0 or not np.isfinite(rate):
        raise MalformedError(f"non-positive sampling rate {rate}")
    labels = None
    if extra:
        chunk = r.take(extra)
        try:
            parts = chunk.decode("utf-8").split("\x00")
        except UnicodeDecodeError:
            raise MalformedError("label chunk is not valid UTF-8") from None
        if len(parts) != n_channels or any(not p for p in parts):
            raise MalformedError("label chunk does not hold one non-empty label per channel")
        labels = tuple(parts)
    r.finish()
    return n_channels, float(rate), kind, labels, n_samples, n_events


def _decode_data_payload(r: _Reader) -> np.ndarray:
    n_channels, n_samples, kind_code, _reserved = r.unpack("<IIII")
    kind = _decode_kind(kind_code)
    if n_channels < 1 or n_samples < 1:
        raise MalformedError(f"degenerate block {n_samples}x{n_channels}")
    nbytes = n_samples * n_channels * kind.dtype.itemsize
    body = r.take(nbytes)
    r.finish()
    return np.frombuffer(body, dtype=kind.dtype).reshape(n_samples, n_channels).copy()


def _decode_events_payload(r: _Reader) -> tuple[Event, ...]:
    events = []
    while r.pos < len(r.buf):
        kind_len, value, sample, offset, duration = r.unpack("<IiQiI")
        raw_kind = r.take(kind_len)
        try:
            kind = raw_kind.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedError("event kind is not valid UTF-8") from None
        events.append(Event(value=value, sample=sample, kind=kind,
                            offset_samples=offset, duration_samples=duration))
    r.finish()
    return tuple(events)


def decode_request(raw: bytes):
    """Decode a client request message; raises ProtocolError on any defect."""
    command, r = _split(raw)
    if command == GET_HDR:
        r.finish()
        return GetHeader()
    if command == FLUSH:
        r.finish()
        return Flush()
    if command == PUT_HDR:
        n_channels, rate, kind, labels, _, _ = _decode_header_payload(r)
        return PutHeader(n_channels=n_channels, sampling_rate_hz=rate,
                         data_kind=kind, channel_labels=labels)
    if command == PUT_DAT:
        return PutData(data=_decode_data_payload(r))
    if command == PUT_EVT:
        return PutEvents(events=_decode_events_payload(r))
    if command == GET_DAT:
        begin, end = r.unpack("<QQ")
        r.finish()
        return GetData(begin=begin, end=end)
    if command == GET_EVT:
        begin, end = r.unpack("<QQ")
        r.finish()
        return GetEvents(begin=begin, end=end)
    if command == WAIT_DAT:
        ms, me, timeout = r.unpack("<QQI")
        r.finish()
        return WaitData(min_samples=None if ms == WAIT_IGNORE else ms,
                        min_events=None if me == WAIT_IGNORE else me,
                        timeout_ms=timeout)
    raise MalformedError(f"unknown request command 0x{command:x}")


def decode_response(raw: bytes, request_command: int):
    """Decode a server response in the context of the request it answers."""
    command, r = _split(raw)
    if command == RESP_ERR:
        (reason,) = r.unpack("<I")
        r.finish()
        return ErrorResponse(reason=reason)
    if command != RESP_OK:
        raise MalformedError(f"response has non-response command 0x{command:x}")
    if request_command in (PUT_HDR, PUT_DAT, PUT_EVT, FLUSH):
        r.finish()
        return OkResponse()
    if request_command == GET_HDR:
        n_channels, rate, kind, labels, n_samples, n_events = _decode_header_payload(r)
        return HeaderResponse(n_channels=n_channels, sampling_rate_hz=rate,
                              data_kind=kind, channel_labels=labels,
                              n_samples=n_samples, n_events=n_events)
    if request_command == GET_DAT:
        return DataResponse(data=_decode_data_payload(r))
    if request_command == GET_EVT:
        return EventsResponse(events=_decode_events_payload(r))
    if request_command == WAIT_DAT:
        n_samples, n_events = r.unpack("<QQ")
        r.finish()
        return WaitResponse(n_samples=n_samples, n_events=n_events)
    raise MalformedError(f"no response layout for request command 0x{request_command:x}")


# --- bare payload codecs (reused by the replay file format) -------------------

def header_payload(n_channels: int, sampling_rate_hz: float, data_kind: DataKind,
                   channel_labels=None) -> bytes:
    return _encode_header_payload(
        n_channels, float(np.float32(sampling_rate_hz)), data_kind, channel_labels)


def parse_header_payload(buf: bytes):
    """Returns (n_channels, rate, data_kind, labels, n_samples, n_events)."""
    return _decode_header_payload(_Reader(buf))


def data_payload(data: np.ndarray) -> bytes:
    return _encode_data_payload(data)


def parse_data_payload(buf: bytes) -> np.ndarray:
    return _decode_data_payload(_Reader(buf))


def events_payload(events) -> bytes:
    return _encode_events_payload(events)


def parse_events_payload(buf: bytes) -> tuple[Event, ...]:
    return _decode_events_payload(_Reader(buf))


def request_command_of(msg) -> int:
    """Wire command a request message travels under."""
    for cls, cmd in ((GetHeader, GET_HDR), (Flush, FLUSH), (PutHeader, PUT_HDR),
                     (PutData, PUT_DAT), (PutEvents, PUT_EVT), (GetData, GET_DAT),
                     (GetEvents, GET_EVT), (WaitData, WAIT_DAT)):
        if isinstance(msg, cls):
            return cmd
    raise TypeError(f"not a request message: {type(msg).__name__}")
