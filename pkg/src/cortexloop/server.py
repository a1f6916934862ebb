"""TCP buffer server exposing one RingStore to many concurrent clients.

One service thread per connection, strict request-to-response ordering per
connection, and a shared store whose mutations are serialized internally.
WAIT_DAT parks on the store's condition variable, so idle pollers cost no
CPU, and a stalled reader only ever blocks its own connection thread --
responses are sent outside the store lock.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from . import protocol
from ._net import recv_message
from .errors import ProtocolError, reason_for_exception
from .ring import RingStore
from .types import StreamHeader

log = logging.getLogger("cortexloop.server")

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 5000


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        server: BufferServer = self.server.owner
        try:
            while not server.stopping.is_set():
                try:
                    raw = recv_message(sock)
                except ProtocolError as exc:
                    # Framing is unrecoverable mid-stream; report and drop.
                    log.debug("connection %s: unrecoverable frame: %s",
                              self.client_address, exc)
                    self._send(sock, protocol.ErrorResponse(
                        reason_for_exception(exc)))
                    return
                if raw is None:
                    return
                response = server.handle_message(raw)
                self._send(sock, response)
        except (ConnectionError, BrokenPipeError, OSError):
            log.debug("connection %s dropped", self.client_address)

    @staticmethod
    def _send(sock, msg):
        try:
            sock.sendall(protocol.encode(msg))
        except (ConnectionError, BrokenPipeError, OSError):
            pass


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 128  # bursts of pollers must not hit SYN retries


class BufferServer:
    """Serve a RingStore over TCP on host:port."""

    def __init__(self, store: RingStore | None = None,
                 host: str = DEFAULT_HOST, port: int = DEFAULT_PORT):
        self.store = store if store is not None else RingStore()
        self.stopping = threading.Event()
        self._tcp = _TcpServer((host, port), _ConnectionHandler)
        self._tcp.owner = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    @property
    def port(self) -> int:
        return self._tcp.server_address[1]

    def serve(self) -> "BufferServer":
        """Start accepting connections on a background thread."""
        if self._thread is None:
            self._thread = threading.Thread(
                target=self._tcp.serve_forever, kwargs={"poll_interval": 0.1},
                name="cortexloop-server", daemon=True)
            self._thread.start()
            log.info("buffer server listening on %s:%d", *self.address)
        return self

    def shutdown(self) -> None:
        """Stop the server; pending waits return current counters first."""
        self.stopping.set()
        self.store.wake_waiters()
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        log.info("buffer server stopped")

    def __enter__(self):
        return self.serve()

    def __exit__(self, *exc):
        self.shutdown()

    # --- request dispatch --------------------------------------------------

    def handle_message(self, raw: bytes):
        """Map one raw request to a response message (exported for tests)."""
        try:
            request = protocol.decode_request(raw)
        except ProtocolError as exc:
            return protocol.ErrorResponse(reason_for_exception(exc))
        try:
            return self._dispatch(request)
        except Exception as exc:  # noqa: BLE001 - every store error maps to a code
            reason = reason_for_exception(exc)
            if reason == 5:
                log.exception("internal error handling %s", type(request).__name__)
            return protocol.ErrorResponse(reason)

    def _dispatch(self, request):
        store = self.store
        if isinstance(request, protocol.PutHeader):
            store.put_header(StreamHeader(
                n_channels=request.n_channels,
                sampling_rate_hz=request.sampling_rate_hz,
                channel_labels=request.channel_labels,
                data_kind=request.data_kind))
            return protocol.OkResponse()
        if isinstance(request, protocol.GetHeader):
            h = store.get_header()
            return protocol.HeaderResponse(
                n_channels=h.n_channels, sampling_rate_hz=h.sampling_rate_hz,
                data_kind=h.data_kind, channel_labels=h.channel_labels,
                n_samples=h.n_samples_total, n_events=h.n_events_total)
        if isinstance(request, protocol.PutData):
            store.append_samples(request.data)
            return protocol.OkResponse()
        if isinstance(request, protocol.GetData):
            block = store.read_samples(request.begin, request.end)
            return protocol.DataResponse(data=block.data)
        if isinstance(request, protocol.PutEvents):
            store.append_events(request.events)
            return protocol.OkResponse()
        if isinstance(request, protocol.GetEvents):
            events = store.read_events(request.begin, request.end)
            return protocol.EventsResponse(events=tuple(events))
        if isinstance(request, protocol.WaitData):
            n_samples, n_events = store.wait_until(
                min_samples=request.min_samples, min_events=request.min_events,
                timeout_ms=request.timeout_ms, cancel=self.stopping)
            return protocol.WaitResponse(n_samples=n_samples, n_events=n_events)
        if isinstance(request, protocol.Flush):
            store.flush()
            return protocol.OkResponse()
        return protocol.ErrorResponse(4)


def serve(host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
          store: RingStore | None = None) -> BufferServer:
    """Create and start a buffer server; returns the running handle."""
    return BufferServer(store=store, host=host, port=port).serve()
