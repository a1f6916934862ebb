"""Typed client for the buffer server.

Each verb is a thin request/response mapping.  A connection carries one
in-flight request at a time; callers needing parallel polls open separate
connections.  Server reason codes surface as the same exception classes
the store raises locally, so pipeline code handles both identically.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from . import protocol
from ._net import recv_message
from .errors import (
    ConnectCancelledError,
    NotConnectedError,
    ProtocolError,
    error_for_reason,
)
from .types import Event, SampleBlock, StreamHeader

log = logging.getLogger("cortexloop.client")

DEFAULT_RETRY_INTERVAL_MS = 500
# Grace added to socket timeouts beyond the server-side wait timeout.
_IO_GRACE_S = 10.0


class BufferClient:
    """Client connection to one buffer server."""

    def __init__(self):
        self._sock: socket.socket | None = None
        self._lock = threading.RLock()
        self.connect_attempts = 0

    # --- connection management ----------------------------------------------

    def connect(self, host: str, port: int = 5000) -> "BufferClient":
        """Connect once; raises OSError on failure."""
        with self._lock:
            if self._sock is not None:
                raise RuntimeError("already connected")
            sock = socket.create_connection((host, port), timeout=_IO_GRACE_S)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            self.connect_attempts = 1
        return self

    def connect_with_retry(self, host: str, port: int = 5000,
                           interval_ms: int = DEFAULT_RETRY_INTERVAL_MS,
                           cancel: threading.Event | None = None,
                           max_attempts: int | None = None) -> "BufferClient":
        """Retry connecting at a fixed interval until success or cancellation.

        The attempt count is kept in ``connect_attempts`` and carried on
        ``ConnectCancelledError`` when cancelled.
        """
        attempts = 0
        while True:
            if cancel is not None and cancel.is_set():
                self.connect_attempts = attempts
                raise ConnectCancelledError(attempts)
            attempts += 1
            try:
                self.connect(host, port)
                self.connect_attempts = attempts
                log.info("connected to %s:%d on attempt %d", host, port, attempts)
                return self
            except OSError:
                log.debug("connect attempt %d to %s:%d failed", attempts, host, port)
            if max_attempts is not None and attempts >= max_attempts:
                self.connect_attempts = attempts
                raise ConnectCancelledError(attempts)
            if cancel is not None:
                if cancel.wait(interval_ms / 1000.0):
                    self.connect_attempts = attempts
                    raise ConnectCancelledError(attempts)
            else:
                time.sleep(interval_ms / 1000.0)

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def disconnect(self) -> None:
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.disconnect()

    # --- request plumbing ----------------------------------------------------

    def _request(self, msg, io_timeout: float | None = None):
        with self._lock:
            if self._sock is None:
                raise NotConnectedError("client is not connected")
            command = protocol.request_command_of(msg)
            self._sock.settimeout(io_timeout if io_timeout is not None else _IO_GRACE_S)
            try:
                self._sock.sendall(protocol.encode(msg))
                raw = recv_message(self._sock)
            except (OSError, ProtocolError) as exc:
                self.disconnect()
                raise NotConnectedError(f"connection lost: {exc}") from exc
            if raw is None:
                self.disconnect()
                raise NotConnectedError("server closed the connection")
            response = protocol.decode_response(raw, command)
            if isinstance(response, protocol.ErrorResponse):
                raise error_for_reason(response.reason, type(msg).__name__)
            return response

    # --- verbs ---------------------------------------------------------------

    def put_header(self, header: StreamHeader) -> None:
        header.validate()
        self._request(protocol.PutHeader(
            n_channels=header.n_channels,
            sampling_rate_hz=header.sampling_rate_hz,
            data_kind=header.data_kind,
            channel_labels=header.channel_labels))

    def get_header(self) -> StreamHeader:
        resp = self._request(protocol.GetHeader())
        return StreamHeader(
            n_channels=resp.n_channels, sampling_rate_hz=resp.sampling_rate_hz,
            channel_labels=resp.channel_labels, data_kind=resp.data_kind,
            n_samples_total=resp.n_samples, n_events_total=resp.n_events)

    def put_samples(self, data) -> None:
        self._request(protocol.PutData(data=data))

    def get_samples(self, begin: int, end: int) -> SampleBlock:
        resp = self._request(protocol.GetData(begin=begin, end=end))
        return SampleBlock(start_index=begin, data=resp.data)

    def put_events(self, events) -> None:
        self._request(protocol.PutEvents(events=tuple(events)))

    def get_events(self, begin: int, end: int) -> list[Event]:
        resp = self._request(protocol.GetEvents(begin=begin, end=end))
        return list(resp.events)

    def wait_data(self, min_samples: int | None = None, min_events: int | None = None,
                  timeout_ms: int = 0) -> tuple[int, int]:
        resp = self._request(
            protocol.WaitData(min_samples=min_samples, min_events=min_events,
                              timeout_ms=timeout_ms),
            io_timeout=timeout_ms / 1000.0 + _IO_GRACE_S)
        return resp.n_samples, resp.n_events

    def flush(self) -> None:
        self._request(protocol.Flush())
