"""Real-time epoching and chained concurrent processing stages.

Sources poll the buffer server (long-poll at a configurable rate, default
60 Hz) and emit epochs either locked to marker events or on a sliding
window grid.  Map stages are event-driven: they wake only when their
upstream emits, apply a user function, and re-emit with label and
provenance preserved.  Every stage runs on its own thread; reads and saves
are safe concurrently with production, and a waitable ``new_epoch`` signal
supports one or many waiters.

Stage retention is bounded: event-locked sources keep everything up to a
cap (reads for training need the full set; exceeding the cap is an
explicit CapacityError, never silent loss), sliding sources keep a ring of
recent windows.  A slow downstream stage never blocks upstream emission;
it just misses windows that have left the ring (counted as dropped).

Saved-epoch files (magic ``CLEP``) are binary: version u16, n_epochs u32,
n_samples u32, n_channels u32, data_kind u32, then per epoch a label i32
(-1 when absent), origin u64, and row-major sample data.
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import (
    CapacityError,
    EmptyError,
    EndOfStreamError,
    EpochFileError,
    EvictedError,
    NoHeaderError,
    NotYetAvailableError,
)
from .types import DataKind, Epoch, Event

log = logging.getLogger("cortexloop.pipeline")

EPOCH_MAGIC = b"CLEP"
EPOCH_VERSION = 1

DEFAULT_POLL_RATE_HZ = 60.0
DEFAULT_RETAIN_ALL_CAP = 10_000
DEFAULT_RETAIN_RING = 256


@dataclass
class EpochConfig:
    """Epoching geometry: event-locked when event_ids is set, sliding when hop_s is."""

    tmin_s: float
    tmax_s: float
    poll_rate_hz: float = DEFAULT_POLL_RATE_HZ
    event_ids: frozenset | None = None
    hop_s: float | None = None

    def __post_init__(self):
        if not self.tmax_s > self.tmin_s:
            raise ValueError(f"tmin {self.tmin_s} must be < tmax {self.tmax_s}")
        if not self.poll_rate_hz > 0:
            raise ValueError("poll_rate_hz must be positive")
        if self.event_ids is not None:
            self.event_ids = frozenset(int(v) for v in self.event_ids)
            if not self.event_ids:
                raise ValueError("event_ids must be non-empty for event-locked mode")
        if self.hop_s is not None and not self.hop_s > 0:
            raise ValueError("hop_s must be positive")

    def window_samples(self, fs: float) -> int:
        return max(1, round((self.tmax_s - self.tmin_s) * fs))

    def offset_samples(self, fs: float) -> int:
        return round(self.tmin_s * fs)


@dataclass
class StageStats:
    no_epochs: int
    dropped: int
    last_latency_ms: float


class Stage:
    """Base class: retention, the new-epoch signal, reads, and saves."""

    def __init__(self, name: str, retain: str = "all",
                 retain_cap: int = DEFAULT_RETAIN_ALL_CAP):
        if retain not in ("all", "ring"):
            raise ValueError("retain must be 'all' or 'ring'")
        self.name = name
        self.new_epoch = threading.Event()
        self._cond = threading.Condition()
        self._retained: deque[Epoch] = deque()
        self._retain = retain
        self._retain_cap = retain_cap
        self._emit_seq = 0
        self._save_cursor = 0
        self._dropped = 0
        self._last_latency_ms = 0.0
        self._finished = False
        self._failure: Exception | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # --- lifecycle --------------------------------------------------------

    def start(self) -> "Stage":
        """Start the stage thread; calling again on a live stage is a no-op."""
        with self._cond:
            if self._thread is not None or self._finished:
                return self
            self._thread = threading.Thread(target=self._guarded_run,
                                            name=f"stage-{self.name}", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        """Drain the in-flight epoch, halt, and propagate end-of-stream."""
        self._stop.set()
        self.wake()
        thread = self._thread
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=10)
        self._finish()

    def wake(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def _guarded_run(self):
        try:
            self._run()
        except Exception as exc:  # noqa: BLE001 - surfaced on the next read
            log.exception("stage %s failed", self.name)
            with self._cond:
                self._failure = exc
        finally:
            self._finish()

    def _run(self):  # pragma: no cover - overridden
        raise NotImplementedError

    def _finish(self):
        with self._cond:
            if not self._finished:
                self._finished = True
                self._cond.notify_all()

    @property
    def finished(self) -> bool:
        with self._cond:
            return self._finished

    @property
    def failure(self) -> Exception | None:
        with self._cond:
            return self._failure

    # --- emission ----------------------------------------------------------

    def _emit(self, data: np.ndarray, label: int | None, origin: int,
              span: tuple[int, int], latency_ms: float = 0.0) -> Epoch:
        epoch = Epoch(data=data, label=label, origin=origin, span=span,
                      emitted_at=time.monotonic())
        with self._cond:
            epoch.seq = self._emit_seq
            if len(self._retained) >= self._retain_cap:
                if self._retain == "all":
                    raise CapacityError(
                        f"stage {self.name} exceeded its retained-epoch cap "
                        f"of {self._retain_cap}")
                self._retained.popleft()
            self._retained.append(epoch)
            self._emit_seq += 1
            self._last_latency_ms = latency_ms
            self.new_epoch.set()
            self._cond.notify_all()
        return epoch

    def _count_dropped(self, n: int = 1) -> None:
        with self._cond:
            self._dropped += n

    def _epochs_since(self, seq: int) -> tuple[list[Epoch], int, int]:
        """Retained epochs with .seq >= seq, plus (missed, next_seq)."""
        with self._cond:
            first = self._emit_seq - len(self._retained)
            missed = max(0, first - seq)
            lo = max(seq, first) - first
            chunk = list(self._retained)[lo:]
            return chunk, missed, self._emit_seq

    # --- reads --------------------------------------------------------------

    @property
    def no_epochs(self) -> int:
        with self._cond:
            return self._emit_seq

    @property
    def dropped(self) -> int:
        with self._cond:
            return self._dropped

    def stats(self) -> StageStats:
        with self._cond:
            return StageStats(no_epochs=self._emit_seq, dropped=self._dropped,
                              last_latency_ms=self._last_latency_ms)

    def _check_failure_locked(self):
        if self._failure is not None:
            raise self._failure

    def wait_new_epoch(self, timeout_ms: int | None = None) -> bool:
        """True if an epoch arrived since the last read_epoch, else False on timeout."""
        timeout = None if timeout_ms is None else timeout_ms / 1000.0
        if self.new_epoch.is_set():
            return True
        if self.finished:
            return self.new_epoch.is_set()
        return self.new_epoch.wait(timeout)

    def peek_epoch(self) -> Epoch:
        """Most recent epoch without consuming the new flag."""
        with self._cond:
            self._check_failure_locked()
            if not self._retained:
                if self._finished:
                    raise EndOfStreamError(f"stage {self.name} ended with no epochs")
                raise EmptyError(f"stage {self.name} has produced no epoch yet")
            return self._retained[-1]

    def read_epoch(self) -> tuple[np.ndarray, int | None]:
        """Latest (data, label); consumes the new-epoch flag."""
        epoch = self.peek_epoch()
        self.new_epoch.clear()
        return epoch.data, epoch.label

    def _snapshot(self, since: int | None = None) -> list[Epoch]:
        with self._cond:
            self._check_failure_locked()
            epochs = list(self._retained)
        if since is not None:
            epochs = [e for e in epochs if e.seq >= since]
        return epochs

    def read_all_epochs(self) -> tuple[np.ndarray, np.ndarray]:
        """All retained epochs as (stacked data, labels); resets the save cursor."""
        with self._cond:
            self._check_failure_locked()
            epochs = list(self._retained)
            self._save_cursor = self._emit_seq
        return _stack(epochs)

    def save_epochs(self, path) -> tuple[np.ndarray, np.ndarray]:
        """Persist all retained epochs; returns them like read_all_epochs."""
        with self._cond:
            self._check_failure_locked()
            epochs = list(self._retained)
            self._save_cursor = self._emit_seq
        write_epochs(path, epochs)
        return _stack(epochs)

    def save_new_epochs(self, path) -> tuple[np.ndarray, np.ndarray]:
        """Persist epochs since the last save/read-all, then advance the cursor."""
        with self._cond:
            self._check_failure_locked()
            cursor = self._save_cursor
            epochs = [e for e in self._retained if e.seq >= cursor]
            self._save_cursor = self._emit_seq
        write_epochs(path, epochs)
        return _stack(epochs)


def _stack(epochs: list[Epoch]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([-1 if e.label is None else e.label for e in epochs],
                      dtype=np.int32)
    if not epochs:
        return np.empty((0, 0)), labels
    data = np.stack([np.asarray(e.data) for e in epochs])
    return data, labels


# --- sources -------------------------------------------------------------------

class _SourceStage(Stage):
    """Shared polling scaffolding: header discovery and the poll period."""

    def __init__(self, client, cfg: EpochConfig, name: str, retain: str,
                 retain_cap: int):
        super().__init__(name=name, retain=retain, retain_cap=retain_cap)
        self.client = client
        self.cfg = cfg
        self._poll_ms = max(1, round(1000.0 / cfg.poll_rate_hz))
        self.fs: float | None = None

    def _await_header(self) -> bool:
        while not self._stop.is_set():
            try:
                header = self.client.get_header()
                self.fs = header.sampling_rate_hz
                return True
            except NoHeaderError:
                time.sleep(self._poll_ms / 1000.0)
        return False


class EventLockedSource(_SourceStage):
    """Emits one labeled epoch per matching marker event, in event order."""

    def __init__(self, client, cfg: EpochConfig, name: str = "event-epochs",
                 retain: str = "all", retain_cap: int = DEFAULT_RETAIN_ALL_CAP):
        if cfg.event_ids is None:
            raise ValueError("event-locked source needs cfg.event_ids")
        super().__init__(client, cfg, name, retain, retain_cap)

    def _run(self):
        if not self._await_header():
            return
        fs = self.fs
        win = self.cfg.window_samples(fs)
        off = self.cfg.offset_samples(fs)
        seen_events = 0
        pending: deque[tuple[Event, int, int]] = deque()
        while True:
            stopping = self._stop.is_set()
            need = pending[0][2] if pending else None
            t_poll = time.monotonic()
            n_s, n_e = self.client.wait_data(
                min_samples=need, min_events=seen_events + 1,
                timeout_ms=0 if stopping else self._poll_ms)
            if n_e > seen_events:
                for ev in self.client.get_events(seen_events, n_e):
                    if ev.value in self.cfg.event_ids:
                        begin = ev.sample + off
                        pending.append((ev, begin, begin + win))
                    # non-matching events are simply not epochs
                seen_events = n_e
            while pending and pending[0][2] <= n_s:
                ev, begin, end = pending.popleft()
                if begin < 0:
                    self._count_dropped()
                    log.warning("%s: span [%d, %d) starts before the stream",
                                self.name, begin, end)
                    continue
                try:
                    block = self.client.get_samples(begin, end)
                except EvictedError:
                    self._count_dropped()
                    log.warning("%s: epoch span [%d, %d) evicted before fetch",
                                self.name, begin, end)
                    continue
                except NotYetAvailableError:
                    pending.appendleft((ev, begin, end))
                    break
                self._emit(block.data, label=ev.value, origin=ev.sample,
                           span=(begin, end),
                           latency_ms=(time.monotonic() - t_poll) * 1000.0)
            if stopping:
                return


class SlidingSource(_SourceStage):
    """Emits unlabeled windows over the hop grid [k*hop, k*hop + win)."""

    def __init__(self, client, cfg: EpochConfig, name: str = "sliding-windows",
                 retain: str = "ring", retain_cap: int = DEFAULT_RETAIN_RING):
        if cfg.hop_s is None:
            raise ValueError("sliding source needs cfg.hop_s")
        super().__init__(client, cfg, name, retain, retain_cap)

    def _run(self):
        if not self._await_header():
            return
        fs = self.fs
        win = self.cfg.window_samples(fs)
        hop = max(1, round(self.cfg.hop_s * fs))
        k = 0
        while True:
            stopping = self._stop.is_set()
            t_poll = time.monotonic()
            n_s, _ = self.client.wait_data(
                min_samples=k * hop + win,
                timeout_ms=0 if stopping else self._poll_ms)
            while k * hop + win <= n_s:
                begin, end = k * hop, k * hop + win
                try:
                    block = self.client.get_samples(begin, end)
                except EvictedError:
                    self._count_dropped()
                    k += 1
                    continue
                except NotYetAvailableError:
                    break
                self._emit(block.data, label=None, origin=k, span=(begin, end),
                           latency_ms=(time.monotonic() - t_poll) * 1000.0)
                k += 1
            if stopping:
                return


class MapStage(Stage):
    """Applies a function to each upstream epoch, event-driven.

    Wakes only on upstream emission; label, origin, and span are
    preserved.  An exception inside ``fn`` drops that epoch (counted and
    logged) and the stage continues.  ``fn`` must not mutate its input.
    """

    def __init__(self, upstream: Stage, fn, name: str | None = None,
                 retain: str | None = None, retain_cap: int | None = None):
        if retain is None:
            retain = upstream._retain
        if retain_cap is None:
            retain_cap = upstream._retain_cap
        super().__init__(name=name or f"map({getattr(fn, '__name__', 'fn')})",
                         retain=retain, retain_cap=retain_cap)
        self.upstream = upstream
        self.fn = fn

    def _run(self):
        cursor = 0
        up = self.upstream
        while True:
            with up._cond:
                if up._emit_seq <= cursor and not up._finished and not self._stop.is_set():
                    up._cond.wait(timeout=0.1)
            chunk, missed, cursor = up._epochs_since(cursor)
            if missed:
                self._count_dropped(missed)
            for ep in chunk:
                t0 = time.monotonic()
                try:
                    out = self.fn(ep.data)
                except Exception as exc:  # noqa: BLE001 - per-epoch isolation
                    self._count_dropped()
                    log.warning("%s: dropped epoch %d (%s: %s)", self.name,
                                ep.seq, type(exc).__name__, exc)
                    continue
                self._emit(np.asarray(out), label=ep.label, origin=ep.origin,
                           span=ep.span,
                           latency_ms=(time.monotonic() - ep.emitted_at) * 1000.0)
            if self._stop.is_set():
                return
            if up.finished and cursor >= up.no_epochs:
                return

    def stop(self) -> None:
        self.upstream.wake()
        super().stop()


# --- factories (paper-shaped constructors) ----------------------------------------

def event_locked_source(client, cfg: EpochConfig | None = None, **kwargs
                        ) -> EventLockedSource:
    if cfg is None:
        cfg = EpochConfig(
            tmin_s=kwargs.pop("tmin_s", 0.0), tmax_s=kwargs.pop("tmax_s", 1.0),
            poll_rate_hz=kwargs.pop("poll_rate_hz", DEFAULT_POLL_RATE_HZ),
            event_ids=frozenset(kwargs.pop("event_ids")))
    return EventLockedSource(client, cfg, **kwargs)


def sliding_source(client, cfg: EpochConfig | None = None, **kwargs) -> SlidingSource:
    if cfg is None:
        cfg = EpochConfig(
            tmin_s=kwargs.pop("tmin_s", 0.0), tmax_s=kwargs.pop("tmax_s", 1.0),
            poll_rate_hz=kwargs.pop("poll_rate_hz", DEFAULT_POLL_RATE_HZ),
            hop_s=kwargs.pop("hop_s"))
    return SlidingSource(client, cfg, **kwargs)


def map_stage(upstream: Stage, fn, **kwargs) -> MapStage:
    return MapStage(upstream, fn, **kwargs)


# --- offline oracles ---------------------------------------------------------------

def offline_event_epochs(data: np.ndarray, events, fs: float, tmin_s: float,
                         tmax_s: float, event_ids) -> list[Epoch]:
    """Single-pass offline segmentation; the reference for online equivalence."""
    cfg = EpochConfig(tmin_s=tmin_s, tmax_s=tmax_s, event_ids=frozenset(event_ids))
    win, off = cfg.window_samples(fs), cfg.offset_samples(fs)
    out = []
    for ev in events:
        if ev.value not in cfg.event_ids:
            continue
        begin = ev.sample + off
        end = begin + win
        if begin < 0 or end > data.shape[0]:
            continue
        out.append(Epoch(data=data[begin:end].copy(), label=ev.value,
                         origin=ev.sample, span=(begin, end)))
    return out


def offline_sliding_epochs(data: np.ndarray, fs: float, tmin_s: float,
                           tmax_s: float, hop_s: float) -> list[Epoch]:
    cfg = EpochConfig(tmin_s=tmin_s, tmax_s=tmax_s, hop_s=hop_s)
    win = cfg.window_samples(fs)
    hop = max(1, round(hop_s * fs))
    out = []
    k = 0
    while k * hop + win <= data.shape[0]:
        begin = k * hop
        out.append(Epoch(data=data[begin:begin + win].copy(), label=None,
                         origin=k, span=(begin, begin + win)))
        k += 1
    return out


# --- epoch files ---------------------------------------------------------------------

def _coerce_2d(data: np.ndarray) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"epoch data must be at most 2-D, got shape {arr.shape}")
    return arr


def write_epochs(path, epochs: list[Epoch]) -> None:
    """Write a CLEP v1 file; all epochs must share shape and dtype."""
    arrays = [_coerce_2d(e.data) for e in epochs]
    if arrays:
        shape, dtype = arrays[0].shape, arrays[0].dtype
        for a in arrays[1:]:
            if a.shape != shape or a.dtype != dtype:
                raise ValueError("epochs in one file must share shape and dtype")
        kind = DataKind.from_dtype(dtype)
    else:
        shape, kind = (0, 0), DataKind.float32
    with open(path, "wb") as fh:
        fh.write(EPOCH_MAGIC)
        fh.write(struct.pack("<HIIII", EPOCH_VERSION, len(arrays),
                             shape[0], shape[1], int(kind)))
        for epoch, arr in zip(epochs, arrays):
            label = -1 if epoch.label is None else int(epoch.label)
            fh.write(struct.pack("<iQ", label, epoch.origin))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_epochs_file(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a CLEP file; returns (labels i32, origins u64, data (n, s, c))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != EPOCH_MAGIC:
        raise EpochFileError("not a CLEP epoch file")
    try:
        version, n_epochs, n_samples, n_channels, kind_code = \
            struct.unpack_from("<HIIII", raw, 4)
    except struct.error as exc:
        raise EpochFileError(f"truncated CLEP head: {exc}") from exc
    if version != EPOCH_VERSION:
        raise EpochFileError(f"unsupported CLEP version {version}")
    try:
        kind = DataKind(kind_code)
    except ValueError:
        raise EpochFileError(f"unknown data kind {kind_code}") from None
    itemsize = kind.dtype.itemsize
    per_epoch = 12 + n_samples * n_channels * itemsize
    expected = 22 + n_epochs * per_epoch
    if len(raw) != expected:
        raise EpochFileError(
            f"CLEP length {len(raw)} does not match header (expected {expected})")
    labels = np.empty(n_epochs, dtype=np.int32)
    origins = np.empty(n_epochs, dtype=np.uint64)
    data = np.empty((n_epochs, n_samples, n_channels), dtype=kind.dtype)
    pos = 22
    for i in range(n_epochs):
        labels[i], origins[i] = struct.unpack_from("<iQ", raw, pos)
        pos += 12
        block = np.frombuffer(raw, dtype=kind.dtype,
                              count=n_samples * n_channels, offset=pos)
        data[i] = block.reshape(n_samples, n_channels)
        pos += n_samples * n_channels * itemsize
    return labels, origins, data
