"""Marker sinks: one send() interface over several transports.

Each send is stamped immediately before the write and recorded in call
order.  Values live in the 8-bit trigger domain 0..255.  Sinks are scoped:
use them as context managers; sending on a closed sink raises.

Wire formats (bit-exact):
  udp-datagram  -> one datagram [0x4D, value]
  serial-frame  -> [0x02, value, value XOR 0x02] at 115200-8N1
  buffer-inject -> an Event(value, sample = server's current head) via a client
  loopback-log  -> in-memory record only
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from .errors import MarkerRangeError, SinkClosedError
from .types import Event

log = logging.getLogger("cortexloop.markers")

UDP_MAGIC = 0x4D
SERIAL_STX = 0x02
SERIAL_BAUD = 115200  # 8N1


@dataclass(frozen=True)
class SendRecord:
    value: int
    timestamp: float  # monotonic, immediately before the write
    seq: int


class MarkerSink:
    """Base sink: open/close lifecycle, range checks, send records."""

    kind = "abstract"

    def __init__(self):
        self._open = True
        self._seq = 0
        self.records: list[SendRecord] = []

    @property
    def is_open(self) -> bool:
        return self._open

    def send(self, value: int) -> SendRecord:
        if not self._open:
            raise SinkClosedError(f"{self.kind} sink is closed")
        if not 0 <= int(value) <= 255:
            raise MarkerRangeError(f"marker value {value} outside 0..255")
        record = SendRecord(value=int(value), timestamp=time.monotonic(),
                            seq=self._seq)
        self._write(record)
        self._seq += 1
        self.records.append(record)
        return record

    def _write(self, record: SendRecord) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def close(self) -> None:
        self._open = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackSink(MarkerSink):
    """Records sends in memory; the log itself is the effect."""

    kind = "loopback-log"

    def _write(self, record: SendRecord) -> None:
        pass


class UdpSink(MarkerSink):
    kind = "udp-datagram"

    def __init__(self, host: str = "127.0.0.1", port: int = 5550):
        super().__init__()
        self._addr = (host, port)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def _write(self, record: SendRecord) -> None:
        self._sock.sendto(bytes((UDP_MAGIC, record.value)), self._addr)

    def close(self) -> None:
        super().close()
        self._sock.close()


class EmulatedSerialPort:
    """In-memory stand-in for a COM port: write() appends, read_all() drains."""

    def __init__(self, name: str = "EMU0"):
        self.name = name
        self.baudrate = SERIAL_BAUD
        self._buf = bytearray()
        self._lock = threading.Lock()

    def write(self, data: bytes) -> int:
        with self._lock:
            self._buf.extend(data)
        return len(data)

    def read_all(self) -> bytes:
        with self._lock:
            out = bytes(self._buf)
            self._buf.clear()
        return out


class SerialSink(MarkerSink):
    """Frames markers as [STX, value, checksum] onto a write()-able port."""

    kind = "serial-frame"

    def __init__(self, port):
        super().__init__()
        self.port = port if not isinstance(port, str) else EmulatedSerialPort(port)

    @staticmethod
    def frame(value: int) -> bytes:
        return bytes((SERIAL_STX, value, value ^ SERIAL_STX))

    def _write(self, record: SendRecord) -> None:
        self.port.write(self.frame(record.value))


class BufferInjectSink(MarkerSink):
    """Appends marker events to the buffer server at its current stream head."""

    kind = "buffer-inject"

    def __init__(self, client):
        super().__init__()
        self.client = client

    def _write(self, record: SendRecord) -> None:
        n_samples, _ = self.client.wait_data(timeout_ms=0)
        self.client.put_events([Event(value=record.value, sample=n_samples)])


_KINDS = {
    "loopback": LoopbackSink,
    "loopback-log": LoopbackSink,
    "udp": UdpSink,
    "udp-datagram": UdpSink,
    "serial": SerialSink,
    "serial-frame": SerialSink,
    "buffer": BufferInjectSink,
    "buffer-inject": BufferInjectSink,
}


def open_marker_sink(kind: str, **params) -> MarkerSink:
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown marker sink kind {kind!r}") from None
    return cls(**params)
