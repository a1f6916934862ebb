"""Buffer server + client integration tests over loopback TCP."""

import socket
import struct
import threading
import time

import numpy as np
import pytest

from cortexloop import (
    ConnectCancelledError,
    DataKind,
    Event,
    EvictedError,
    NoHeaderError,
    NotConnectedError,
    RingStore,
    StreamHeader,
)
from cortexloop.client import BufferClient
from cortexloop.server import BufferServer


@pytest.fixture
def server():
    srv = BufferServer(RingStore(), host="127.0.0.1", port=0).serve()
    yield srv
    srv.shutdown()


def connect(server) -> BufferClient:
    return BufferClient().connect("127.0.0.1", server.port)


def test_header_round_trip_with_labels(server):
    with connect(server) as c:
        header = StreamHeader(n_channels=3, sampling_rate_hz=200.0,
                              channel_labels=("C3", "Cz", "C4"),
                              data_kind=DataKind.float64)
        c.put_header(header)
        assert c.get_header() == header


def test_get_before_header_is_no_header(server):
    with connect(server) as c:
        with pytest.raises(NoHeaderError):
            c.get_samples(0, 10)
        with pytest.raises(NoHeaderError):
            c.get_header()


def test_sample_bits_survive_round_trip_all_kinds(server):
    rng = np.random.default_rng(5)
    for kind in DataKind:
        with connect(server) as c:
            c.put_header(StreamHeader(n_channels=4, sampling_rate_hz=100.0,
                                      data_kind=kind))
            if kind.dtype.kind == "f":
                data = rng.standard_normal((37, 4)).astype(kind.dtype)
            else:
                data = rng.integers(-500, 500, size=(37, 4)).astype(kind.dtype)
            c.put_samples(data)
            out = c.get_samples(0, 37)
            assert out.data.tobytes() == data.tobytes()
            assert out.data.dtype == kind.dtype


def test_events_round_trip(server):
    with connect(server) as c:
        c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
        c.put_samples(np.zeros((100, 1), dtype=np.float32))
        evts = [Event(value=1, sample=10), Event(value=2, sample=20, kind="stim")]
        c.put_events(evts)
        assert c.get_events(0, 2) == evts


def test_wait_data_timeout_zero_returns_counters(server):
    with connect(server) as c:
        c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
        c.put_samples(np.zeros((50, 1), dtype=np.float32))
        t0 = time.monotonic()
        assert c.wait_data(min_samples=150, timeout_ms=0) == (50, 0)
        assert time.monotonic() - t0 < 0.2


def test_get_samples_evicted(server):
    server.store.capacity_samples = 128  # shrink before header installs the ring
    with connect(server) as c:
        c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
        c.put_samples(np.arange(300, dtype=np.float32)[:, None])
        with pytest.raises(EvictedError):
            c.get_samples(0, 100)


def test_reader_sees_every_sample_exactly_once(server):
    """One writer streams packets; a concurrent reader reassembles the stream."""
    n_packets, packet = 50, 20
    writer_done = threading.Event()
    sent = []

    def writer():
        with connect(server) as c:
            c.put_header(StreamHeader(n_channels=2, sampling_rate_hz=200.0))
            for k in range(n_packets):
                block = np.full((packet, 2), k, dtype=np.float32)
                block[:, 1] = np.arange(k * packet, (k + 1) * packet)
                sent.append(block)
                c.put_samples(block)
                time.sleep(0.002)
        writer_done.set()

    received = []

    def reader():
        with connect(server) as c:
            # wait for the header to exist
            for _ in range(100):
                try:
                    c.get_header()
                    break
                except NoHeaderError:
                    time.sleep(0.005)
            seen = 0
            while True:
                n, _ = c.wait_data(min_samples=seen + 1, timeout_ms=100)
                if n > seen:
                    received.append(c.get_samples(seen, n).data)
                    seen = n
                elif writer_done.is_set() and seen == n_packets * packet:
                    return

    w = threading.Thread(target=writer)
    r = threading.Thread(target=reader)
    w.start(); r.start()
    w.join(timeout=10); r.join(timeout=10)
    assert not w.is_alive() and not r.is_alive()
    got = np.concatenate(received)
    expected = np.concatenate(sent)
    assert got.shape == expected.shape
    assert got.tobytes() == expected.tobytes()


def test_fifty_wait_pollers_release_together(server):
    with connect(server) as c:
        c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=200.0))
        c.put_samples(np.zeros((100, 1), dtype=np.float32))

        release_times = [None] * 50
        threshold = 200

        def poller(i):
            with connect(server) as pc:
                n, _ = pc.wait_data(min_samples=threshold, timeout_ms=5000)
                release_times[i] = time.monotonic()
                assert n >= threshold

        threads = [threading.Thread(target=poller, args=(i,)) for i in range(50)]
        for t in threads:
            t.start()
        time.sleep(0.3)  # let every poller park
        t_cross = time.monotonic()
        c.put_samples(np.zeros((100, 1), dtype=np.float32))  # crosses threshold
        for t in threads:
            t.join(timeout=5)
        assert all(rt is not None for rt in release_times)
        packet_period = 0.1
        worst = max(rt - t_cross for rt in release_times)
        assert worst < packet_period, f"slowest poller released after {worst:.3f}s"


def test_unknown_command_keeps_connection_open(server):
    with connect(server) as c:
        c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
    sock = socket.create_connection(("127.0.0.1", server.port))
    try:
        sock.sendall(struct.pack("<HHI", 1, 0x666, 0))
        resp = sock.recv(64)
        assert struct.unpack("<HHI", resp[:8])[1] == 0x105  # RESP_ERR
        # connection still usable
        sock.sendall(struct.pack("<HHI", 1, 0x201, 0))  # GET_HDR
        resp = sock.recv(1024)
        assert struct.unpack("<HHI", resp[:8])[1] == 0x104  # RESP_OK
    finally:
        sock.close()


def test_disconnect_then_operations_fail(server):
    c = connect(server)
    c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
    c.disconnect()
    with pytest.raises(NotConnectedError):
        c.get_header()
    with pytest.raises(NotConnectedError):
        c.wait_data(timeout_ms=0)


def test_shutdown_releases_pending_waits():
    srv = BufferServer(RingStore(), host="127.0.0.1", port=0).serve()
    c = connect(srv)
    c.put_header(StreamHeader(n_channels=1, sampling_rate_hz=10.0))
    c.put_samples(np.zeros((10, 1), dtype=np.float32))
    result = {}

    def waiter():
        result["counters"] = c.wait_data(min_samples=10**9, timeout_ms=30000)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.2)
    srv.shutdown()
    t.join(timeout=5)
    assert not t.is_alive()
    assert result["counters"] == (10, 0)
    c.disconnect()


class TestConnectWithRetry:
    def test_immediate_when_server_up(self, server):
        c = BufferClient().connect_with_retry("127.0.0.1", server.port,
                                              interval_ms=100)
        assert c.connect_attempts == 1
        c.disconnect()

    def test_connects_after_server_appears(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()

        srv_box = {}

        def start_later():
            time.sleep(1.2)
            srv_box["srv"] = BufferServer(RingStore(), "127.0.0.1", port).serve()

        t = threading.Thread(target=start_later)
        t.start()
        c = BufferClient().connect_with_retry("127.0.0.1", port, interval_ms=250)
        t.join()
        # attempts at 0, 0.25, ... -> first success around 1.2s is attempt 5-7
        assert 5 <= c.connect_attempts <= 7
        c.disconnect()
        srv_box["srv"].shutdown()

    def test_cancel_reports_attempt_count(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()

        cancel = threading.Event()

        def cancel_later():
            time.sleep(0.26)
            cancel.set()

        t = threading.Thread(target=cancel_later)
        t.start()
        with pytest.raises(ConnectCancelledError) as err:
            BufferClient().connect_with_retry("127.0.0.1", port,
                                              interval_ms=100, cancel=cancel)
        t.join()
        assert err.value.attempts == 3
