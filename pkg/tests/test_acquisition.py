"""Synthetic source and record/replay tests."""

import math
import threading
import time

import numpy as np
import pytest

from cortexloop import DataKind, ReplayFormatError, RingStore, StreamHeader
from cortexloop.acquisition import (
    ReplayWriter,
    SynthConfig,
    ToneComponent,
    iter_replay,
    load_replay,
    record,
    run_replay,
    run_synth,
)
from cortexloop.client import BufferClient
from cortexloop.decode import bandpower_features
from cortexloop.server import BufferServer


class CountingSink:
    def __init__(self):
        self.n_samples = 0
        self.n_events = 0
        self.header = None

    def put_header(self, header):
        self.header = header

    def put_samples(self, data):
        self.n_samples += data.shape[0]

    def put_events(self, events):
        self.n_events += len(events)


def alternating_schedule(n_trials=40, duration=1.0):
    return [(1 if i % 2 == 0 else 2, duration) for i in range(n_trials)]


def test_total_sample_count_matches_schedule(tmp_path):
    cfg = SynthConfig(n_channels=8, sampling_rate_hz=200.0, seed=1)
    sink = CountingSink()
    report = run_synth(cfg, sink, [(1, 60.0)], speed=math.inf)
    assert report.error is None
    assert sink.n_samples == 12000
    assert report.total_samples == 12000


def test_forty_alternating_trials_give_forty_events():
    cfg = SynthConfig(n_channels=2, sampling_rate_hz=200.0, seed=2)
    sink = CountingSink()
    report = run_synth(cfg, sink, alternating_schedule(40, 1.0), speed=math.inf)
    assert sink.n_events == 40
    values = [ev.value for ev in report.events]
    assert values == [1, 2] * 20
    samples = [ev.sample for ev in report.events]
    assert samples == [i * 200 for i in range(40)]


def test_event_samples_align_with_boundaries():
    cfg = SynthConfig(n_channels=2, sampling_rate_hz=128.0, seed=3)
    sink = CountingSink()
    schedule = [(1, 0.5), (2, 0.25), (1, 1.0)]
    report = run_synth(cfg, sink, schedule, speed=math.inf)
    assert [(ev.sample, ev.value) for ev in report.events] == report.boundaries
    assert report.boundaries == [(0, 1), (64, 2), (96, 1)]


def test_class_gated_component_is_spectrally_visible(tmp_path):
    path = tmp_path / "gated.clrp"
    cfg = SynthConfig(
        n_channels=4, sampling_rate_hz=200.0, noise_sigma=1.0, seed=4,
        components=(ToneComponent(channels=(0, 1), freq_hz=12.0, amplitude=2.0,
                                  class_gate=2),))
    with ReplayWriter(path) as writer:
        report = run_synth(cfg, writer, alternating_schedule(20, 1.0),
                           speed=math.inf)
    header, data, events = load_replay(path)
    fs = header.sampling_rate_hz
    band_idx = 1  # band (12, 16) holds the 12 Hz edge tone's upper half

    def mean_power(label):
        feats = []
        for start, lab in report.boundaries:
            if lab != label:
                continue
            window = data[start:start + 200].astype(np.float64)
            feats.append(bandpower_features(window, fs).reshape(8, 4)[band_idx, :2])
        return float(np.mean(feats))

    assert mean_power(2) > mean_power(1) + 0.5


def test_label_and_window_helpers():
    cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, seed=5)
    report = run_synth(cfg, CountingSink(), [(1, 1.0), (2, 1.0)], speed=math.inf)
    assert report.label_of_sample(0) == 1
    assert report.label_of_sample(99) == 1
    assert report.label_of_sample(100) == 2
    assert report.window_label(0, 100) == 1
    assert report.window_label(50, 150) is None
    assert report.window_label(100, 200) == 2


def test_pacing_accuracy_speed_one():
    cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, jitter_ms=0.0, seed=6)
    report = run_synth(cfg, CountingSink(), [(1, 3.0)], speed=1.0)
    period = cfg.packet_samples / cfg.sampling_rate_hz
    offsets = [p.t_send - report.started_at - k * period
               for k, p in enumerate(report.packets)]
    assert max(abs(o) for o in offsets) < 0.005


def test_sink_failure_yields_partial_report():
    class FailingSink(CountingSink):
        def put_samples(self, data):
            super().put_samples(data)
            if self.n_samples >= 40:
                raise ConnectionError("boom")

    cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, seed=7)
    report = run_synth(cfg, FailingSink(), [(1, 10.0)], speed=math.inf)
    assert report.error is not None and "boom" in report.error
    assert len(report.packets) < 100


def test_nyquist_component_rejected():
    with pytest.raises(ValueError):
        SynthConfig(n_channels=2, sampling_rate_hz=100.0,
                    components=(ToneComponent(channels=(0,), freq_hz=50.0,
                                              amplitude=1.0),))


class TestReplayFiles:
    def test_record_then_replay_is_byte_identical(self, tmp_path):
        path = tmp_path / "session.clrp"
        store_a = RingStore()
        with BufferServer(store_a, "127.0.0.1", 0) as srv_a:
            writer_client = BufferClient().connect("127.0.0.1", srv_a.port)
            tap_client = BufferClient().connect("127.0.0.1", srv_a.port)
            stop = threading.Event()
            rec_box = {}
            rec_thread = threading.Thread(
                target=lambda: rec_box.update(
                    report=record(tap_client, path, stop, poll_ms=20)))
            rec_thread.start()
            cfg = SynthConfig(
                n_channels=3, sampling_rate_hz=200.0, seed=8,
                components=(ToneComponent(channels=(0,), freq_hz=10.0,
                                          amplitude=1.0),))
            run_synth(cfg, writer_client, alternating_schedule(6, 0.5), speed=50.0)
            time.sleep(0.3)
            stop.set()
            rec_thread.join(timeout=5)
            assert not rec_thread.is_alive()
            original = store_a.read_samples(0, store_a.counters()[0]).data
            original_events = store_a.read_events(0, store_a.counters()[1])
            writer_client.disconnect()
            tap_client.disconnect()

        header, data, events = load_replay(path)
        assert data.tobytes() == original.tobytes()
        assert events == original_events

        # replay into a fresh server reproduces the stream exactly
        store_b = RingStore()
        with BufferServer(store_b, "127.0.0.1", 0) as srv_b:
            with BufferClient().connect("127.0.0.1", srv_b.port) as rc:
                report = run_replay(path, rc, speed=math.inf)
            assert report.n_samples == original.shape[0]
            replayed = store_b.read_samples(0, store_b.counters()[0]).data
            assert replayed.tobytes() == original.tobytes()
            assert store_b.read_events(0, store_b.counters()[1]) == original_events

    def test_replay_speed_scales_wall_clock(self, tmp_path):
        path = tmp_path / "paced.clrp"
        cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, seed=9)
        with ReplayWriter(path) as writer:
            run_synth(cfg, writer, [(1, 2.0)], speed=1.0)
        sink = CountingSink()
        report = run_replay(path, sink, speed=2.0)
        assert sink.n_samples == 200
        assert abs(report.wall_seconds - 1.0) < 0.1

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "t.clrp"
        cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, seed=10)
        with ReplayWriter(path) as writer:
            run_synth(cfg, writer, [(1, 1.0)], speed=math.inf)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(ReplayFormatError):
            list(iter_replay(path))

    def test_wrong_magic_is_format_error(self, tmp_path):
        path = tmp_path / "bad.clrp"
        path.write_bytes(b"NOPE\x01\x00")
        with pytest.raises(ReplayFormatError):
            list(iter_replay(path))

    def test_replay_preserves_relative_event_times(self, tmp_path):
        path = tmp_path / "times.clrp"
        cfg = SynthConfig(n_channels=1, sampling_rate_hz=100.0, seed=11)
        with ReplayWriter(path) as writer:
            run_synth(cfg, writer, [(1, 0.5), (2, 0.5)], speed=math.inf)
        kinds = [k for k, _, _ in iter_replay(path)]
        assert kinds[0] == 1  # header first
        times = [t for _, t, _ in iter_replay(path)]
        assert times == sorted(times)
