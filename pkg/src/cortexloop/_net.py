"""Socket helpers shared by the buffer server and client."""

from __future__ import annotations

import socket

from .errors import TruncatedError
from .protocol import FRAME_SIZE, MAX_PAYLOAD_BYTES, parse_frame_header


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF at a message boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise TruncatedError(f"connection closed {n - got} bytes into a message")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> bytes | None:
    """Read one full framed message; None on clean EOF before a message."""
    head = recv_exact(sock, FRAME_SIZE)
    if head is None:
        return None
    _, size = parse_frame_header(head)
    if size > MAX_PAYLOAD_BYTES:
        raise TruncatedError(f"declared payload {size} exceeds cap {MAX_PAYLOAD_BYTES}")
    if size == 0:
        return head
    body = recv_exact(sock, size)
    if body is None:
        raise TruncatedError("connection closed before payload")
    return head + body
