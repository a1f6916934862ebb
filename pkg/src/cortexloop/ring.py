"""Bounded in-memory sample/event store with absolute monotone indexing.

One writer and many readers share a store; a single condition variable
serializes mutations and lets ``wait_until`` park without spinning.  Reads
copy under the lock, so a reader never observes a block mixing pre- and
post-append data.  Evicted ranges fail loudly instead of returning partial
data.
"""

from __future__ import annotations

import threading
import time

import numpy as np

from .errors import (
    EventOrderError,
    EvictedError,
    NoHeaderError,
    NotYetAvailableError,
    ShapeError,
)
from .types import Event, SampleBlock, StreamHeader

DEFAULT_CAPACITY_SAMPLES = 1 << 20
DEFAULT_CAPACITY_EVENTS = 1 << 14


class RingStore:
    """Ring-buffered samples and events behind the buffer server.

    The readable sample range is exactly
    ``[max(0, n_samples_total - capacity_samples), n_samples_total)``.
    """

    def __init__(self, capacity_samples: int = DEFAULT_CAPACITY_SAMPLES,
                 capacity_events: int = DEFAULT_CAPACITY_EVENTS):
        if capacity_samples <= 0 or capacity_events <= 0:
            raise ValueError("capacities must be positive")
        self.capacity_samples = int(capacity_samples)
        self.capacity_events = int(capacity_events)
        self._cond = threading.Condition()
        self._header: StreamHeader | None = None
        self._ring: np.ndarray | None = None
        self._total_samples = 0
        self._events: list[Event] = []
        self._events_evicted = 0
        self._total_events = 0

    # --- header ---------------------------------------------------------

    def put_header(self, header: StreamHeader) -> None:
        """Install a header and reset all stream state."""
        header.validate()
        with self._cond:
            self._header = header.with_counters(0, 0)
            self._ring = np.empty(
                (self.capacity_samples, header.n_channels), dtype=header.data_kind.dtype)
            self._total_samples = 0
            self._events = []
            self._events_evicted = 0
            self._total_events = 0
            self._cond.notify_all()

    def get_header(self) -> StreamHeader:
        with self._cond:
            if self._header is None:
                raise NoHeaderError("no header has been put")
            return self._header.with_counters(self._total_samples, self._total_events)

    @property
    def has_header(self) -> bool:
        with self._cond:
            return self._header is not None

    def flush(self) -> None:
        """Drop all samples and events, keeping the header (counters reset)."""
        with self._cond:
            self._total_samples = 0
            self._events = []
            self._events_evicted = 0
            self._total_events = 0
            self._cond.notify_all()

    # --- samples ----------------------------------------------------------

    def append_samples(self, data) -> int:
        """Append a contiguous block; returns the new sample total.

        ``data`` is a (n_samples, n_channels) array of the header's dtype,
        or a SampleBlock whose start_index must equal the current total.
        """
        if isinstance(data, SampleBlock):
            block_start: int | None = data.start_index
            data = data.data
        else:
            block_start = None
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ShapeError(f"expected a (n>=1, n_channels) block, got shape {arr.shape}")
        with self._cond:
            if self._header is None:
                raise NoHeaderError("append_samples before put_header")
            if arr.shape[1] != self._header.n_channels:
                raise ShapeError(
                    f"block has {arr.shape[1]} columns, header has {self._header.n_channels}")
            if arr.dtype != self._header.data_kind.dtype:
                raise ShapeError(
                    f"block dtype {arr.dtype} does not match header {self._header.data_kind.name}")
            if block_start is not None and block_start != self._total_samples:
                raise ShapeError(
                    f"block start {block_start} is not the stream head {self._total_samples}")
            n = arr.shape[0]
            cap = self.capacity_samples
            if n >= cap:
                # Block alone overwrites the whole ring; keep the newest rows
                # at the rows their absolute indices map to.
                new_total = self._total_samples + n
                rows = np.arange(new_total - cap, new_total) % cap
                self._ring[rows] = arr[n - cap:]
            else:
                pos = self._total_samples % cap
                first = min(n, cap - pos)
                self._ring[pos:pos + first] = arr[:first]
                if first < n:
                    self._ring[:n - first] = arr[first:]
            self._total_samples += n
            self._cond.notify_all()
            return self._total_samples

    def read_samples(self, begin: int, end: int) -> SampleBlock:
        """Return samples [begin, end) bit-identical to those appended."""
        if begin >= end:
            raise ValueError(f"empty or inverted range [{begin}, {end})")
        if begin < 0:
            raise ValueError("begin must be non-negative")
        with self._cond:
            if self._header is None:
                raise NoHeaderError("read_samples before put_header")
            if end > self._total_samples:
                raise NotYetAvailableError(
                    f"range end {end} beyond stream head {self._total_samples}")
            horizon = max(0, self._total_samples - self.capacity_samples)
            if begin < horizon:
                raise EvictedError(f"range begin {begin} before eviction horizon {horizon}")
            idx = np.arange(begin, end) % self.capacity_samples
            return SampleBlock(start_index=begin, data=self._ring[idx].copy())

    # --- events -----------------------------------------------------------

    def append_events(self, events) -> int:
        """Append a batch of events; returns the new event total.

        Batches must preserve global non-decreasing sample order, and no
        event may reference beyond the current stream head.
        """
        batch = list(events)
        with self._cond:
            if self._header is None:
                raise NoHeaderError("append_events before put_header")
            prev = self._events[-1].sample if self._events else None
            for ev in batch:
                if not isinstance(ev, Event):
                    raise ShapeError(f"expected Event, got {type(ev).__name__}")
                if ev.sample > self._total_samples:
                    raise EventOrderError(
                        f"event at sample {ev.sample} beyond stream head {self._total_samples}")
                if prev is not None and ev.sample < prev:
                    raise EventOrderError(
                        f"event at sample {ev.sample} would break non-decreasing order "
                        f"(last stored at {prev})")
                prev = ev.sample
            self._events.extend(batch)
            self._total_events += len(batch)
            overflow = len(self._events) - self.capacity_events
            if overflow > 0:
                del self._events[:overflow]
                self._events_evicted += overflow
            if batch:
                self._cond.notify_all()
            return self._total_events

    def read_events(self, begin_idx: int, end_idx: int) -> list[Event]:
        """Return events with absolute event indices [begin_idx, end_idx)."""
        if begin_idx > end_idx:
            raise ValueError(f"inverted range [{begin_idx}, {end_idx})")
        if begin_idx < 0:
            raise ValueError("begin_idx must be non-negative")
        with self._cond:
            if self._header is None:
                raise NoHeaderError("read_events before put_header")
            if begin_idx == end_idx:
                return []
            if end_idx > self._total_events:
                raise NotYetAvailableError(
                    f"event index {end_idx} beyond event total {self._total_events}")
            if begin_idx < self._events_evicted:
                raise EvictedError(
                    f"event index {begin_idx} before eviction horizon {self._events_evicted}")
            lo = begin_idx - self._events_evicted
            hi = end_idx - self._events_evicted
            return self._events[lo:hi]

    # --- counters and waiting ----------------------------------------------

    def counters(self) -> tuple[int, int]:
        with self._cond:
            return self._total_samples, self._total_events

    def wait_until(self, min_samples: int | None = None, min_events: int | None = None,
                   timeout_ms: int = 0, cancel: threading.Event | None = None,
                   ) -> tuple[int, int]:
        """Block until a counter threshold is reached or the timeout elapses.

        Returns the current counters in every case.  ``None`` thresholds are
        ignored; a set ``cancel`` event releases the wait early (used for
        orderly server shutdown).  Only the caller blocks; writers are
        never delayed by waiting readers.
        """
        deadline = None
        if timeout_ms is not None:
            deadline = time.monotonic() + max(0, timeout_ms) / 1000.0

        def satisfied() -> bool:
            if cancel is not None and cancel.is_set():
                return True
            if min_samples is not None and self._total_samples >= min_samples:
                return True
            if min_events is not None and self._total_events >= min_events:
                return True
            if min_samples is None and min_events is None:
                return True
            return False

        with self._cond:
            if self._header is None:
                raise NoHeaderError("wait_until before put_header")
            while not satisfied():
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    break
                self._cond.wait(remaining)
            return self._total_samples, self._total_events

    def wake_waiters(self) -> None:
        """Nudge all blocked wait_until callers to re-check (e.g. on shutdown)."""
        with self._cond:
            self._cond.notify_all()

    @property
    def eviction_horizon(self) -> int:
        with self._cond:
            return max(0, self._total_samples - self.capacity_samples)
