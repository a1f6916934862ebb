"""Epoching pipeline tests: spans, chaining, retention, files, equivalence."""

import math
import threading
import time

import numpy as np
import pytest
import scipy.signal

from cortexloop import (
    CapacityError,
    EmptyError,
    EndOfStreamError,
    Event,
    RingStore,
    StreamHeader,
)
from cortexloop.acquisition import SynthConfig, run_synth
from cortexloop.client import BufferClient
from cortexloop.errors import EpochFileError
from cortexloop.pipeline import (
    EpochConfig,
    MapStage,
    event_locked_source,
    offline_event_epochs,
    offline_sliding_epochs,
    read_epochs_file,
    sliding_source,
    write_epochs,
)
from cortexloop.server import BufferServer
from cortexloop.types import Epoch


@pytest.fixture
def server():
    srv = BufferServer(RingStore(), host="127.0.0.1", port=0).serve()
    yield srv
    srv.shutdown()


def connect(server):
    return BufferClient().connect("127.0.0.1", server.port)


def push_stream(server, n_samples=3000, fs=200.0, n_channels=3, events=()):
    """Plant a ramp stream + events directly into the store."""
    store = server.store
    store.put_header(StreamHeader(n_channels=n_channels, sampling_rate_hz=fs))
    data = np.arange(n_samples, dtype=np.float32)[:, None] * np.ones(n_channels,
                                                                     np.float32)
    store.append_samples(data)
    if events:
        store.append_events(list(events))
    return data


def drain(stage, expect, timeout=5.0):
    deadline = time.monotonic() + timeout
    while stage.no_epochs < expect and time.monotonic() < deadline:
        time.sleep(0.01)
    return stage.no_epochs


class TestEventLocked:
    def test_epoch_span_and_label(self, server):
        push_stream(server, events=[Event(value=1, sample=1000)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=1, event_ids={1, 2})
            src.start()
            assert drain(src, 1) == 1
            src.stop()
            ep = src.peek_epoch()
            assert ep.span == (1000, 1200)
            assert ep.n_samples == 200
            assert ep.label == 1
            assert np.array_equal(ep.data[:, 0],
                                  np.arange(1000, 1200, dtype=np.float32))

    def test_two_second_epochs(self, server):
        push_stream(server, events=[Event(value=2, sample=100)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=2, event_ids={1, 2})
            src.start()
            drain(src, 1)
            src.stop()
            assert src.peek_epoch().n_samples == 400

    def test_nonmatching_event_filtered(self, server):
        push_stream(server, events=[Event(value=7, sample=100),
                                    Event(value=1, sample=200)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=1, event_ids={1, 2})
            src.start()
            drain(src, 1)
            time.sleep(0.1)
            src.stop()
            assert src.no_epochs == 1
            assert src.peek_epoch().label == 1

    def test_epoch_waits_for_future_samples(self, server):
        store = server.store
        store.put_header(StreamHeader(n_channels=1, sampling_rate_hz=100.0))
        store.append_samples(np.zeros((50, 1), dtype=np.float32))
        store.append_events([Event(value=1, sample=50)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=1, event_ids={1})
            src.start()
            time.sleep(0.2)
            assert src.no_epochs == 0  # span [50, 150) incomplete
            store.append_samples(
                np.arange(50, 200, dtype=np.float32)[:, None])
            assert drain(src, 1) == 1
            src.stop()
            assert src.peek_epoch().span == (50, 150)

    def test_negative_tmin_offset(self, server):
        push_stream(server, events=[Event(value=1, sample=1000)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=-0.5, tmax_s=0.5,
                                      event_ids={1})
            src.start()
            drain(src, 1)
            src.stop()
            assert src.peek_epoch().span == (900, 1100)


class TestSliding:
    def test_window_grid(self, server):
        push_stream(server, n_samples=400)
        with connect(server) as c:
            src = sliding_source(c, tmin_s=0, tmax_s=1, hop_s=0.1)
            src.start()
            drain(src, 2)
            src.stop()
            chunk, _, _ = src._epochs_since(0)
            assert chunk[0].span == (0, 200)
            assert chunk[1].span == (20, 220)
            assert chunk[0].label is None and chunk[0].origin == 0

    def test_hop_equals_win_tiles(self, server):
        push_stream(server, n_samples=1000)
        with connect(server) as c:
            src = sliding_source(c, tmin_s=0, tmax_s=1, hop_s=1.0)
            src.start()
            drain(src, 5)
            src.stop()
            chunk, _, _ = src._epochs_since(0)
            spans = [e.span for e in chunk]
            assert spans == [(0, 200), (200, 400), (400, 600), (600, 800),
                             (800, 1000)]

    def test_591_windows_for_appendix_schedule(self, server):
        push_stream(server, n_samples=12000)
        with connect(server) as c:
            src = sliding_source(c, tmin_s=0, tmax_s=1, hop_s=0.1,
                                 retain_cap=1000)
            src.start()
            assert drain(src, 591, timeout=15) == 591
            time.sleep(0.1)
            src.stop()
            assert src.no_epochs == 591

    def test_offline_count_matches_formula(self):
        data = np.zeros((12000, 2), dtype=np.float32)
        wins = offline_sliding_epochs(data, 200.0, 0, 1, 0.1)
        assert len(wins) == math.floor((12000 - 200) / 20) + 1 == 591

    def test_eviction_counts_dropped_and_continues(self):
        store = RingStore(capacity_samples=300)
        srv = BufferServer(store, "127.0.0.1", 0).serve()
        try:
            store.put_header(StreamHeader(n_channels=1, sampling_rate_hz=100.0))
            with connect(srv) as c:
                src = sliding_source(c, tmin_s=0, tmax_s=1, hop_s=0.5,
                                     poll_rate_hz=200)
                # windows: [0,100), [50,150), ... push past capacity first
                store.append_samples(
                    np.arange(600, dtype=np.float32)[:, None])
                src.start()
                drain(src, 1)
                time.sleep(0.3)
                src.stop()
                # windows ending before horizon 300 are gone: k*50+100 <= ...
                assert src.dropped >= 1
                assert src.no_epochs >= 1
                chunk, _, _ = src._epochs_since(0)
                assert all(e.span[0] >= 300 - 100 for e in chunk)
        finally:
            srv.shutdown()


class TestMapStage:
    def test_identity_map_preserves_epochs(self, server):
        push_stream(server, events=[Event(value=1, sample=100),
                                    Event(value=2, sample=400)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=0.5, event_ids={1, 2})
            mapped = MapStage(src, lambda x: x, name="identity")
            src.start(); mapped.start()
            drain(mapped, 2)
            src.stop(); mapped.stop()
            src_chunk, _, _ = src._epochs_since(0)
            map_chunk, _, _ = mapped._epochs_since(0)
            assert len(map_chunk) == 2
            for a, b in zip(src_chunk, map_chunk):
                assert np.array_equal(a.data, b.data)
                assert (a.label, a.origin, a.span) == (b.label, b.origin, b.span)

    def test_chained_hilbert_mean_equals_offline(self, server):
        rng = np.random.default_rng(0)
        store = server.store
        store.put_header(StreamHeader(n_channels=4, sampling_rate_hz=200.0))
        data = rng.standard_normal((2000, 4)).astype(np.float32)
        store.append_samples(data)
        store.append_events([Event(value=1, sample=s) for s in (0, 500, 1000)])
        fnc_a = lambda x: scipy.signal.hilbert(x, axis=0)  # noqa: E731
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=1, event_ids={1})
            stage_a = MapStage(src, fnc_a)
            stage_b = MapStage(stage_a, np.mean)
            for s in (src, stage_a, stage_b):
                s.start()
            drain(stage_b, 3)
            for s in (stage_b, stage_a, src):
                s.stop()
            online, _, _ = stage_b._epochs_since(0)
            offline = [np.mean(fnc_a(e.data)) for e in
                       offline_event_epochs(data,
                                            [Event(value=1, sample=s)
                                             for s in (0, 500, 1000)],
                                            200.0, 0, 1, {1})]
            assert len(online) == 3
            for got, want in zip(online, offline):
                assert complex(got.data) == complex(want)

    def test_map_exception_drops_and_continues(self, server):
        push_stream(server, n_samples=2000,
                    events=[Event(value=1, sample=s)
                            for s in (0, 200, 400, 600, 800)])

        calls = {"n": 0}

        def flaky(x):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("synthetic failure")
            return x.mean(axis=0)

        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=0.5, event_ids={1})
            mapped = MapStage(src, flaky)
            src.start(); mapped.start()
            drain(mapped, 4)
            time.sleep(0.1)
            src.stop(); mapped.stop()
            stats = mapped.stats()
            assert stats.no_epochs == 4
            assert stats.dropped == 1


class TestReadsAndSaves:
    def test_read_all_labels_aligned(self, server):
        events = [Event(value=(i % 2) + 1, sample=i * 100) for i in range(10)]
        push_stream(server, n_samples=2000, events=events)
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=0.25, event_ids={1, 2})
            src.start()
            drain(src, 10)
            src.stop()
            X, y = src.read_all_epochs()
            assert X.shape == (10, 50, 3)
            assert list(y) == [(i % 2) + 1 for i in range(10)]

    def test_read_epoch_empty_then_end_of_stream(self, server):
        push_stream(server, n_samples=10)
        with connect(server) as c:
            src = sliding_source(c, tmin_s=0, tmax_s=1, hop_s=0.1)
            src.start()
            with pytest.raises(EmptyError):
                src.read_epoch()
            src.stop()
            with pytest.raises(EndOfStreamError):
                src.read_epoch()

    def test_wait_new_epoch_and_consume(self, server):
        push_stream(server, events=[Event(value=1, sample=0)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=0.5, event_ids={1})
            src.start()
            assert src.wait_new_epoch(timeout_ms=3000) is True
            data, label = src.read_epoch()
            assert label == 1 and data.shape == (100, 3)
            assert src.wait_new_epoch(timeout_ms=50) is False
            src.stop()

    def test_save_then_save_new_is_empty(self, server, tmp_path):
        push_stream(server, events=[Event(value=1, sample=0),
                                    Event(value=2, sample=300)])
        with connect(server) as c:
            src = event_locked_source(c, tmin_s=0, tmax_s=1, event_ids={1, 2})
            src.start()
            drain(src, 2)
            src.stop()
            first = tmp_path / "a.clep"
            second = tmp_path / "b.clep"
            X, y = src.save_epochs(first)
            assert X.shape[0] == 2 and list(y) == [1, 2]
            X2, y2 = src.save_new_epochs(second)
            assert X2.shape[0] == 0 and len(y2) == 0
            labels, origins, data = read_epochs_file(first)
            assert list(labels) == [1, 2]
            assert list(origins) == [0, 300]
            assert data.shape == (2, 200, 3)
            labels2, _, _ = read_epochs_file(second)
            assert len(labels2) == 0

    def test_capacity_error_on_retain_all_overflow(self, server):
        push_stream(server, n_samples=2000)
        with connect(server) as c:
            src = sliding_source(c, tmin_s=0, tmax_s=0.5, hop_s=0.05,
                                 retain="all", retain_cap=5)
            src.start()
            deadline = time.monotonic() + 5
            while src.failure is None and time.monotonic() < deadline:
                time.sleep(0.01)
            src.stop()
            assert isinstance(src.failure, CapacityError)
            with pytest.raises(CapacityError):
                src.read_epoch()


class TestEpochFiles:
    def test_round_trip_mixed_labels(self, tmp_path):
        rng = np.random.default_rng(1)
        epochs = [Epoch(data=rng.standard_normal((20, 3)).astype(np.float32),
                        label=None if i % 2 else i, origin=i * 7,
                        span=(i * 7, i * 7 + 20)) for i in range(5)]
        path = tmp_path / "mix.clep"
        write_epochs(path, epochs)
        labels, origins, data = read_epochs_file(path)
        assert list(labels) == [0, -1, 2, -1, 4]
        assert list(origins) == [0, 7, 14, 21, 28]
        for i, e in enumerate(epochs):
            assert np.array_equal(data[i], e.data)

    def test_feature_vectors_coerce_to_rows(self, tmp_path):
        epochs = [Epoch(data=np.arange(4, dtype=np.float64), label=1, origin=k,
                        span=(k, k + 1)) for k in range(3)]
        path = tmp_path / "feat.clep"
        write_epochs(path, epochs)
        labels, _, data = read_epochs_file(path)
        assert data.shape == (3, 1, 4)

    def test_heterogeneous_epochs_rejected(self, tmp_path):
        epochs = [Epoch(data=np.zeros((4, 2)), label=1, origin=0, span=(0, 4)),
                  Epoch(data=np.zeros((5, 2)), label=1, origin=1, span=(0, 5))]
        with pytest.raises(ValueError):
            write_epochs(tmp_path / "x.clep", epochs)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.clep"
        path.write_bytes(b"CLEPxxxx")
        with pytest.raises(EpochFileError):
            read_epochs_file(path)
        path.write_bytes(b"WRNG" + b"\x00" * 30)
        with pytest.raises(EpochFileError):
            read_epochs_file(path)


class TestOnlineOfflineEquivalence:
    def test_equivalence_on_synthetic_run(self, server):
        cfg = SynthConfig(n_channels=4, sampling_rate_hz=200.0, seed=42)
        schedule = [(1 + (i % 2), 0.5) for i in range(12)]
        with connect(server) as synth_client, connect(server) as a_client, \
                connect(server) as b_client:
            src_e = event_locked_source(a_client, tmin_s=0, tmax_s=0.5,
                                        event_ids={1, 2})
            src_s = sliding_source(b_client, tmin_s=0, tmax_s=0.5, hop_s=0.1,
                                   retain_cap=4096)
            src_e.start(); src_s.start()
            run_synth(cfg, synth_client, schedule, speed=math.inf)
            total = server.store.counters()[0]
            drain(src_e, 12)
            n_windows = math.floor((total - 100) / 20) + 1
            drain(src_s, n_windows)
            src_e.stop(); src_s.stop()

            data = server.store.read_samples(0, total).data
            events = server.store.read_events(0, server.store.counters()[1])
            off_e = offline_event_epochs(data, events, 200.0, 0, 0.5, {1, 2})
            off_s = offline_sliding_epochs(data, 200.0, 0, 0.5, 0.1)

            on_e, _, _ = src_e._epochs_since(0)
            assert [(e.span, e.label) for e in on_e] == \
                [(e.span, e.label) for e in off_e]
            for a, b in zip(on_e, off_e):
                assert a.data.tobytes() == b.data.tobytes()

            on_s, _, _ = src_s._epochs_since(0)
            assert len(on_s) == len(off_s) == n_windows
            for a, b in zip(on_s, off_s):
                assert a.span == b.span
                assert a.data.tobytes() == b.data.tobytes()


def test_detection_delay_within_poll_budget(server):
    """Emission lags availability by at most ~2 poll periods plus processing."""
    poll_rate = 20.0
    cfg = SynthConfig(n_channels=2, sampling_rate_hz=100.0, seed=3)
    with connect(server) as synth_client, connect(server) as epoch_client:
        src = sliding_source(epoch_client, tmin_s=0, tmax_s=0.5, hop_s=0.5,
                             poll_rate_hz=poll_rate, retain_cap=512)
        src.start()
        report = run_synth(cfg, synth_client, [(1, 3.0)], speed=1.0)
        drain(src, 5)
        src.stop()
        chunk, _, _ = src._epochs_since(0)
        assert len(chunk) >= 5
        budget = 2.0 / poll_rate + 0.030  # spec bound plus scheduler slack
        for ep in chunk:
            avail = report.avail_time(ep.span[1] - 1)
            assert avail is not None
            delay = ep.emitted_at - avail
            assert -0.001 < delay < budget, f"window {ep.origin} delayed {delay:.3f}s"
