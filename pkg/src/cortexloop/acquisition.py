"""Acquisition sources: synthetic signal generator and file record/replay.

Stands in for the vendor acquisition chain by pacing packets into the
buffer in real time (or faster, via ``speed``).  The synthetic source
plants class-gated oscillatory components and pushes a marker event at the
exact first sample of every class transition -- that transcript is the
ground truth the epoching and decoding tests measure against.

Replay files are self-describing binary: magic ``CLRP``, version u16,
then records of (kind u8, wallclock_us u64, payload_size u32, payload)
where the payload bytes are exactly the wire protocol's PUT_HDR / PUT_DAT
/ PUT_EVT payloads (kind 1 / 2 / 3).
"""

from __future__ import annotations

import bisect
import logging
import math
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .errors import NoHeaderError, ReplayFormatError
from .types import DataKind, Event, StreamHeader

log = logging.getLogger("cortexloop.acquisition")

REPLAY_MAGIC = b"CLRP"
REPLAY_VERSION = 1
RECORD_HEADER = 1
RECORD_DATA = 2
RECORD_EVENTS = 3

_RECORD_PREFIX = struct.Struct("<BQI")


# --- synthetic source ---------------------------------------------------------

@dataclass(frozen=True)
class ToneComponent:
    """Sinusoid mixed into a channel subset, optionally gated by class label."""

    channels: tuple[int, ...]
    freq_hz: float
    amplitude: float
    class_gate: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))


@dataclass
class SynthConfig:
    n_channels: int
    sampling_rate_hz: float
    packet_samples: int | None = None  # default: one tenth of a second
    jitter_ms: float = 0.0
    noise_sigma: float = 1.0
    components: tuple[ToneComponent, ...] = ()
    data_kind: DataKind = DataKind.float32
    seed: int = 0

    def __post_init__(self):
        self.components = tuple(self.components)
        self.data_kind = DataKind(self.data_kind)
        if self.packet_samples is None:
            self.packet_samples = max(1, round(self.sampling_rate_hz / 10))
        if self.packet_samples < 1:
            raise ValueError("packet_samples must be >= 1")
        for comp in self.components:
            if comp.freq_hz >= self.sampling_rate_hz / 2:
                raise ValueError(
                    f"component at {comp.freq_hz} Hz >= Nyquist "
                    f"{self.sampling_rate_hz / 2} Hz")
            if any(c < 0 or c >= self.n_channels for c in comp.channels):
                raise ValueError(f"component channels {comp.channels} out of range")

    def header(self) -> StreamHeader:
        return StreamHeader(n_channels=self.n_channels,
                            sampling_rate_hz=self.sampling_rate_hz,
                            data_kind=self.data_kind)


@dataclass
class PacketRecord:
    start_sample: int
    n_samples: int
    t_send: float  # monotonic, immediately before the push
    t_ack: float   # monotonic, after the push returned


@dataclass
class EventRecord:
    sample: int
    value: int
    t_send: float


@dataclass
class SynthReport:
    """Ground-truth transcript of one synthetic run."""

    fs: float
    n_channels: int
    schedule: list[tuple[int, float]]
    boundaries: list[tuple[int, int]]  # (start_sample, label), ascending
    total_samples: int
    packets: list[PacketRecord] = field(default_factory=list)
    events: list[EventRecord] = field(default_factory=list)
    started_at: float = 0.0
    error: str | None = None

    def label_of_sample(self, index: int) -> int:
        """Class label active at an absolute sample index."""
        starts = [b[0] for b in self.boundaries]
        pos = bisect.bisect_right(starts, index) - 1
        return self.boundaries[max(pos, 0)][1]

    def window_label(self, begin: int, end: int) -> int | None:
        """Label covering the whole window [begin, end); None if mixed."""
        first = self.label_of_sample(begin)
        last = self.label_of_sample(end - 1)
        return first if first == last else None

    def avail_time(self, sample_index: int) -> float | None:
        """Send time of the packet that carried a sample (None if not sent)."""
        starts = [p.start_sample for p in self.packets]
        pos = bisect.bisect_right(starts, sample_index) - 1
        if pos < 0:
            return None
        pkt = self.packets[pos]
        if sample_index >= pkt.start_sample + pkt.n_samples:
            return None
        return pkt.t_send


def _schedule_boundaries(schedule, fs) -> tuple[list[tuple[int, int]], int]:
    boundaries = []
    cursor = 0
    for label, duration_s in schedule:
        n = round(float(duration_s) * fs)
        if n <= 0:
            raise ValueError(f"schedule entry ({label}, {duration_s}) has no samples")
        boundaries.append((cursor, int(label)))
        cursor += n
    return boundaries, cursor


def run_synth(cfg: SynthConfig, sink, schedule, speed: float = 1.0,
              stop: threading.Event | None = None) -> SynthReport:
    """Push a header, paced packets, and transition markers into a sink.

    ``sink`` needs put_header / put_samples / put_events (a connected
    BufferClient or a ReplayWriter).  ``speed`` scales pacing; ``math.inf``
    disables sleeping entirely.  A sink failure aborts the run and is
    reported on the returned transcript's ``error``.
    """
    fs = cfg.sampling_rate_hz
    boundaries, total = _schedule_boundaries(schedule, fs)
    labels_per_sample = np.empty(total, dtype=np.int32)
    for i, (start, label) in enumerate(boundaries):
        end = boundaries[i + 1][0] if i + 1 < len(boundaries) else total
        labels_per_sample[start:end] = label

    report = SynthReport(fs=fs, n_channels=cfg.n_channels,
                         schedule=[(int(l), float(d)) for l, d in schedule],
                         boundaries=boundaries, total_samples=total)
    rng = np.random.default_rng(cfg.seed)
    period = cfg.packet_samples / fs
    pending = list(boundaries)

    try:
        sink.put_header(cfg.header())
        report.started_at = t0 = time.monotonic()

        def push_due_events(head: int) -> None:
            while pending and pending[0][0] <= head:
                sample, label = pending.pop(0)
                t_send = time.monotonic()
                sink.put_events([Event(value=label, sample=sample)])
                report.events.append(EventRecord(sample=sample, value=label,
                                                 t_send=t_send))

        push_due_events(0)
        sent = 0
        k = 0
        while sent < total:
            if stop is not None and stop.is_set():
                report.error = "stopped"
                return report
            if math.isfinite(speed) and speed > 0:
                target = t0 + k * period / speed
                if cfg.jitter_ms:
                    target += rng.uniform(-cfg.jitter_ms, cfg.jitter_ms) / 1000.0
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            n = min(cfg.packet_samples, total - sent)
            block = _render_packet(cfg, rng, sent, n, labels_per_sample)
            t_send = time.monotonic()
            sink.put_samples(block)
            t_ack = time.monotonic()
            report.packets.append(PacketRecord(start_sample=sent, n_samples=n,
                                               t_send=t_send, t_ack=t_ack))
            sent += n
            k += 1
            push_due_events(sent)
    except Exception as exc:  # noqa: BLE001 - partial transcript is the contract
        log.warning("synthetic run aborted: %s", exc)
        report.error = f"{type(exc).__name__}: {exc}"
    return report


def _render_packet(cfg: SynthConfig, rng, start: int, n: int,
                   labels_per_sample: np.ndarray) -> np.ndarray:
    x = cfg.noise_sigma * rng.standard_normal((n, cfg.n_channels))
    if cfg.components:
        idx = np.arange(start, start + n)
        t = idx / cfg.sampling_rate_hz
        window_labels = labels_per_sample[start:start + n]
        for comp in cfg.components:
            wave = np.sin(2 * np.pi * comp.freq_hz * t)
            if comp.class_gate is None:
                gain = comp.amplitude * wave
            else:
                gain = comp.amplitude * wave * (window_labels == comp.class_gate)
            for ch in comp.channels:
                x[:, ch] += gain
    return x.astype(cfg.data_kind.dtype)


# --- replay files ---------------------------------------------------------------

class ReplayWriter:
    """Writes a CLRP stream; doubles as a sink for run_synth."""

    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(REPLAY_MAGIC + struct.pack("<H", REPLAY_VERSION))
        self.n_samples = 0
        self.n_events = 0

    def write_record(self, kind: int, payload: bytes,
                     t_us: int | None = None) -> None:
        if t_us is None:
            t_us = int(time.monotonic() * 1e6)
        self._fh.write(_RECORD_PREFIX.pack(kind, t_us, len(payload)))
        self._fh.write(payload)

    def put_header(self, header: StreamHeader) -> None:
        header.validate()
        self.write_record(RECORD_HEADER, protocol.header_payload(
            header.n_channels, header.sampling_rate_hz, header.data_kind,
            header.channel_labels))

    def put_samples(self, data) -> None:
        data = np.asarray(data)
        self.write_record(RECORD_DATA, protocol.data_payload(data))
        self.n_samples += data.shape[0]

    def put_events(self, events) -> None:
        events = tuple(events)
        self.write_record(RECORD_EVENTS, protocol.events_payload(events))
        self.n_events += len(events)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_replay(path):
    """Yield (kind, t_us, parsed) records; parsed is a StreamHeader,
    an (n, c) ndarray, or a tuple of Events."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if len(magic) < 6 or magic[:4] != REPLAY_MAGIC:
            raise ReplayFormatError("not a CLRP replay file")
        (version,) = struct.unpack("<H", magic[4:6])
        if version != REPLAY_VERSION:
            raise ReplayFormatError(f"unsupported replay version {version}")
        while True:
            prefix = fh.read(_RECORD_PREFIX.size)
            if not prefix:
                return
            if len(prefix) < _RECORD_PREFIX.size:
                raise ReplayFormatError("truncated record prefix")
            kind, t_us, size = _RECORD_PREFIX.unpack(prefix)
            payload = fh.read(size)
            if len(payload) < size:
                raise ReplayFormatError("truncated record payload")
            try:
                if kind == RECORD_HEADER:
                    n_channels, rate, data_kind, labels, _, _ = \
                        protocol.parse_header_payload(payload)
                    parsed = StreamHeader(n_channels=n_channels,
                                          sampling_rate_hz=rate,
                                          channel_labels=labels,
                                          data_kind=data_kind)
                elif kind == RECORD_DATA:
                    parsed = protocol.parse_data_payload(payload)
                elif kind == RECORD_EVENTS:
                    parsed = protocol.parse_events_payload(payload)
                else:
                    raise ReplayFormatError(f"unknown record kind {kind}")
            except ReplayFormatError:
                raise
            except Exception as exc:  # codec errors become format errors
                raise ReplayFormatError(f"bad record payload: {exc}") from exc
            yield kind, t_us, parsed


def load_replay(path) -> tuple[StreamHeader, np.ndarray, list[Event]]:
    """Read a whole replay file into memory for offline processing."""
    header = None
    blocks: list[np.ndarray] = []
    events: list[Event] = []
    for kind, _, parsed in iter_replay(path):
        if kind == RECORD_HEADER:
            if header is not None:
                raise ReplayFormatError("multiple header records")
            header = parsed
        elif kind == RECORD_DATA:
            blocks.append(parsed)
        else:
            events.extend(parsed)
    if header is None:
        raise ReplayFormatError("replay file holds no header record")
    data = (np.concatenate(blocks) if blocks
            else np.empty((0, header.n_channels), dtype=header.data_kind.dtype))
    return header, data, events


@dataclass
class ReplayReport:
    n_samples: int
    n_events: int
    wall_seconds: float


def run_replay(path, sink, speed: float = 1.0,
               stop: threading.Event | None = None) -> ReplayReport:
    """Push a recorded stream into a sink, pacing by recorded timestamps / speed."""
    if not speed > 0:
        raise ValueError("speed must be positive")
    t_wall0 = time.monotonic()
    t_file0 = None
    n_samples = n_events = 0
    for kind, t_us, parsed in iter_replay(path):
        if stop is not None and stop.is_set():
            break
        if t_file0 is None:
            t_file0 = t_us
        if math.isfinite(speed):
            target = t_wall0 + (t_us - t_file0) / 1e6 / speed
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        if kind == RECORD_HEADER:
            sink.put_header(parsed)
        elif kind == RECORD_DATA:
            sink.put_samples(parsed)
            n_samples += parsed.shape[0]
        else:
            sink.put_events(list(parsed))
            n_events += len(parsed)
    return ReplayReport(n_samples=n_samples, n_events=n_events,
                        wall_seconds=time.monotonic() - t_wall0)


# --- live-stream recording -------------------------------------------------------

@dataclass
class RecordingReport:
    path: str
    n_samples: int
    n_events: int


def record(client, path, stop: threading.Event,
           poll_ms: int = 50) -> RecordingReport:
    """Tap a live stream to a replay file until ``stop`` is set.

    Waits for the stream header to appear, then drains new samples and
    events as they arrive; a final drain runs after the stop signal.
    """
    header = None
    while not stop.is_set():
        try:
            header = client.get_header()
            break
        except NoHeaderError:
            time.sleep(poll_ms / 1000.0)
    with ReplayWriter(path) as writer:
        if header is None:
            return RecordingReport(path=str(path), n_samples=0, n_events=0)
        writer.put_header(header)
        seen_s = seen_e = 0
        while True:
            stopping = stop.is_set()
            if stopping:
                n_s, n_e = client.wait_data(timeout_ms=0)
            else:
                n_s, n_e = client.wait_data(min_samples=seen_s + 1,
                                            min_events=seen_e + 1,
                                            timeout_ms=poll_ms)
            if n_s > seen_s:
                writer.put_samples(client.get_samples(seen_s, n_s).data)
                seen_s = n_s
            if n_e > seen_e:
                writer.put_events(client.get_events(seen_e, n_e))
                seen_e = n_e
            if stopping:
                return RecordingReport(path=str(path), n_samples=seen_s,
                                       n_events=seen_e)
