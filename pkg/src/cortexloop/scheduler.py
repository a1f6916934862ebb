"""Headless experiment scheduler: segments and sequences over a frame clock.

A Segment is a quasi-static experiment unit with a duration in frames, an
optional marker, optional response keys, and an opaque stimulus tag.  A
Sequence runs segments back to back with the callback discipline that
keeps flips on time: segment k's frames host after(k-1) and before(k+1)
off the flip path, before(1) runs pre-roll and after(n) post-roll.  In
simulated-clock mode everything is deterministic; in wall-clock mode the
slot callbacks run on a worker thread and an overrun past the segment's
end delays the next segment and is logged as a timing violation.

Markers are sent exactly at the first flip of their segment, stamped with
that flip.  Key input is an injectable channel, keyed to frames on the
simulated clock and to wall time otherwise.
"""

from __future__ import annotations

import json
import logging
import queue
import random
import threading
import time
from dataclasses import dataclass, field

from .errors import SequenceConsumedError, ShuffleExhaustedError

log = logging.getLogger("cortexloop.scheduler")

DEFAULT_FRAME_RATE = 60.0
_UNBOUNDED_FRAME_GUARD = 10_000_000


@dataclass(frozen=True)
class FrameStamp:
    frame: int
    t: float


class SimulatedFrameClock:
    """Deterministic clock: flip() advances exactly one frame, time = frame/rate."""

    mode = "simulated"

    def __init__(self, frame_rate_hz: float = DEFAULT_FRAME_RATE):
        self.frame_rate_hz = float(frame_rate_hz)
        self._frame = 0

    @property
    def frame(self) -> int:
        return self._frame

    def time(self) -> float:
        return self._frame / self.frame_rate_hz

    def flip(self) -> FrameStamp:
        stamp = FrameStamp(frame=self._frame, t=self.time())
        self._frame += 1
        return stamp


class WallFrameClock:
    """Wall-clock frames: flip() sleeps to the next frame boundary."""

    mode = "wall-clock"

    def __init__(self, frame_rate_hz: float = DEFAULT_FRAME_RATE):
        self.frame_rate_hz = float(frame_rate_hz)
        self._frame = 0
        self._t0: float | None = None

    @property
    def frame(self) -> int:
        return self._frame

    def time(self) -> float:
        if self._t0 is None:
            return 0.0
        return time.monotonic() - self._t0

    def flip(self) -> FrameStamp:
        if self._t0 is None:
            self._t0 = time.monotonic()
        target = self._t0 + (self._frame + 1) / self.frame_rate_hz
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        stamp = FrameStamp(frame=self._frame, t=time.monotonic())
        self._frame += 1
        return stamp


@dataclass(frozen=True)
class KeyPress:
    key: str
    frame: int
    t: float


class KeyChannel:
    """Injectable key input: frame-stamped on simulated clocks, time-stamped else."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: list[tuple[str, int | None, float | None]] = []

    def inject(self, key: str, at_frame: int | None = None,
               at_time: float | None = None) -> None:
        with self._lock:
            self._pending.append((key, at_frame, at_time))

    def poll_due(self, clock) -> list[tuple[str, int]]:
        """Keys due at the clock's current frame/time; removed from the channel."""
        now_frame = clock.frame
        now_time = clock.time() if clock.mode == "simulated" else time.monotonic()
        due, keep = [], []
        with self._lock:
            for key, at_frame, at_time in self._pending:
                if at_frame is not None:
                    ready = at_frame <= now_frame
                elif at_time is not None:
                    ready = at_time <= now_time
                else:
                    ready = True
                (due if ready else keep).append((key, at_frame, at_time))
            self._pending = keep
        return [(key, now_frame) for key, _, _ in due]


# --- logs ------------------------------------------------------------------------

@dataclass
class MarkerRecord:
    value: int
    frame: int
    flip_t: float
    send_t: float


@dataclass
class SegmentLog:
    name: str
    index: int
    start_frame: int
    end_frame: int
    marker: MarkerRecord | None = None
    keys: list[KeyPress] = field(default_factory=list)
    error: str | None = None

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame


@dataclass
class Violation:
    segment_index: int
    kind: str
    overrun_s: float


@dataclass
class SequenceLog:
    name: str
    segments: list[SegmentLog] = field(default_factory=list)
    callbacks: list[tuple[str, int]] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    start_frame: int = 0
    end_frame: int = 0

    @property
    def total_frames(self) -> int:
        return self.end_frame - self.start_frame

    def merge_child(self, child: "SequenceLog") -> None:
        self.segments.extend(child.segments)
        self.violations.extend(child.violations)

    def to_jsonl(self, path) -> None:
        """One line-delimited record per segment."""
        with open(path, "w", encoding="utf-8") as fh:
            for seg in self.segments:
                row = {
                    "name": seg.name,
                    "start_frame": seg.start_frame,
                    "end_frame": seg.end_frame,
                    "marker_value": seg.marker.value if seg.marker else None,
                    "marker_flip_t": seg.marker.flip_t if seg.marker else None,
                    "marker_send_t": seg.marker.send_t if seg.marker else None,
                    "keys": [[k.key, k.frame] for k in seg.keys],
                    "error": seg.error,
                }
                fh.write(json.dumps(row) + "\n")


# --- slot executor ------------------------------------------------------------------

class _SlotExecutor:
    """Runs slot callbacks inline (simulated) or on a worker thread (wall)."""

    def __init__(self, inline: bool):
        self.inline = inline
        self._queue: queue.Queue = queue.Queue()
        self._done = threading.Event()
        self._done.set()
        self._thread = None
        if not inline:
            self._thread = threading.Thread(target=self._loop, daemon=True,
                                            name="scheduler-slots")
            self._thread.start()

    def submit(self, work) -> None:
        if self.inline:
            work()
        else:
            self._done.clear()
            self._queue.put(work)

    def _loop(self):
        while True:
            work = self._queue.get()
            if work is None:
                return
            try:
                work()
            finally:
                if self._queue.empty():
                    self._done.set()

    def wait_idle(self) -> float:
        """Blocks until queued slots finish; returns the wait in seconds."""
        if self.inline or self._done.is_set():
            return 0.0
        t0 = time.monotonic()
        self._done.wait()
        return time.monotonic() - t0

    def shutdown(self):
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join(timeout=5)
            self._thread = None


# --- segments -------------------------------------------------------------------------

class Segment:
    """Quasi-static experiment unit.

    ``duration_s=None`` makes the segment unbounded: it ends on a response
    key (any key when ``response_keys`` is None).  Override ``before`` /
    ``after`` / ``on_frame`` in subclasses, or pass callables.
    """

    def __init__(self, duration_s: float | None, name: str | None = None,
                 marker_value: int | None = None, marker_sink=None,
                 response_keys=None, stimulus=None,
                 before=None, after=None, on_frame=None):
        self.duration_s = duration_s
        self.name = name or (str(stimulus) if stimulus is not None else "segment")
        self.marker_value = marker_value
        self.marker_sink = marker_sink
        self.response_keys = set(response_keys) if response_keys else None
        self.stimulus = stimulus
        self._before_cb = before
        self._after_cb = after
        self._on_frame_cb = on_frame

    def frames(self, frame_rate_hz: float) -> int | None:
        if self.duration_s is None:
            return None
        return max(1, round(self.duration_s * frame_rate_hz))

    def before(self) -> None:
        if self._before_cb is not None:
            self._before_cb()

    def after(self) -> None:
        if self._after_cb is not None:
            self._after_cb()

    def on_frame(self, stamp: FrameStamp) -> None:
        if self._on_frame_cb is not None:
            self._on_frame_cb(stamp)

    def _is_response(self, key: str) -> bool:
        return self.response_keys is None or key in self.response_keys

    def run_body(self, clock, keys: KeyChannel | None, index: int,
                 slot_work=None, frame_hooks=()) -> SegmentLog:
        """Flip through the segment's frames; send the marker on the first flip."""
        start = clock.frame
        n_frames = self.frames(clock.frame_rate_hz)
        seg_log = SegmentLog(name=self.name, index=index, start_frame=start,
                             end_frame=start)
        first = True
        while True:
            f = clock.frame
            if n_frames is not None and f - start >= n_frames:
                break
            if f - start >= _UNBOUNDED_FRAME_GUARD:
                raise RuntimeError(
                    f"unbounded segment {self.name!r} ran {f - start} frames "
                    "with no response key")
            if keys is not None:
                due = keys.poll_due(clock)
                for key, frame in due:
                    seg_log.keys.append(KeyPress(key=key, frame=frame,
                                                 t=clock.time()))
                if n_frames is None and any(self._is_response(k) for k, _ in due):
                    break
            stamp = clock.flip()
            if first:
                first = False
                if self.marker_value is not None and self.marker_sink is not None:
                    try:
                        record = self.marker_sink.send(self.marker_value)
                        seg_log.marker = MarkerRecord(
                            value=self.marker_value, frame=stamp.frame,
                            flip_t=stamp.t, send_t=record.timestamp)
                    except Exception as exc:  # noqa: BLE001 - keep flipping
                        seg_log.error = f"marker send failed: {exc}"
                        log.warning("segment %s: %s", self.name, seg_log.error)
                if slot_work is not None:
                    slot_work()
            self.on_frame(stamp)
            for hook in frame_hooks:
                hook(stamp)
        seg_log.end_frame = clock.frame
        return seg_log


def run_segment(segment: Segment, clock, keys: KeyChannel | None = None
                ) -> SegmentLog:
    """Run one segment standalone: before(), frames, after()."""
    segment.before()
    seg_log = segment.run_body(clock, keys, index=0)
    segment.after()
    return seg_log


# --- sequences ----------------------------------------------------------------------------

class Sequence:
    """Ordered, repeatable, shuffleable composition of segments or sequences.

    ``Sequence(items, repeats)`` gives repeated items the same entry in
    ``seg_idcs`` (index into the unique item list); an explicitly repeated
    list gets positional indices.  Shuffles permute items and indices
    together, preserving the multiset.
    """

    def __init__(self, items, repeats: int = 1, shuffle_on_call: bool = False,
                 name: str = "sequence", before=None, after=None, on_frame=None,
                 rng: random.Random | None = None):
        items = list(items)
        if not items:
            raise ValueError("a sequence needs at least one item")
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.segments = items * repeats
        if repeats > 1:
            self.seg_idcs = list(range(len(items))) * repeats
        else:
            self.seg_idcs = list(range(len(items)))
        self.shuffle_on_call = shuffle_on_call
        self.name = name
        self._before_cb = before
        self._after_cb = after
        self._on_frame_cb = on_frame
        self._rng = rng or random.Random()

    # sequence-level hooks (used as parent slots when nested)
    def before(self) -> None:
        if self._before_cb is not None:
            self._before_cb()

    def after(self) -> None:
        if self._after_cb is not None:
            self._after_cb()

    def on_frame(self, stamp: FrameStamp) -> None:
        if self._on_frame_cb is not None:
            self._on_frame_cb(stamp)

    # --- manipulation ---------------------------------------------------------

    def shuffle(self) -> None:
        order = list(range(len(self.segments)))
        self._rng.shuffle(order)
        self.segments = [self.segments[i] for i in order]
        self.seg_idcs = [self.seg_idcs[i] for i in order]

    def shuffle_until(self, predicate, max_tries: int = 10_000) -> None:
        """Reshuffle until predicate(seg_idcs) holds; raises when exhausted."""
        for _ in range(max_tries):
            self.shuffle()
            if predicate(self.seg_idcs):
                return
        raise ShuffleExhaustedError(
            f"no shuffle of {self.name} satisfied the predicate "
            f"in {max_tries} tries")

    def set_segment_attr(self, attr: str, value) -> None:
        """Set an attribute on every segment, recursing into nested sequences."""
        seen = set()
        for item in self.segments:
            if id(item) in seen:
                continue
            seen.add(id(item))
            if isinstance(item, Sequence):
                item.set_segment_attr(attr, value)
            else:
                setattr(item, attr, value)

    # --- execution --------------------------------------------------------------

    def run(self, clock, keys: KeyChannel | None = None,
            _executor: _SlotExecutor | None = None,
            _frame_hooks: tuple = ()) -> SequenceLog:
        if self.shuffle_on_call:
            self.shuffle()
        own_executor = _executor is None
        executor = _executor or _SlotExecutor(inline=(clock.mode == "simulated"))
        seq_log = SequenceLog(name=self.name, start_frame=clock.frame)
        hooks = _frame_hooks + (self.on_frame,)
        items = list(self.segments)
        n = len(items)
        try:
            # pre-roll: before(1) ahead of the first flip
            seq_log.callbacks.append(("before", 1))
            _item_before(items[0])
            for k, item in enumerate(items, start=1):
                slots = self._slot_work(seq_log, items, k)
                self._run_item(item, clock, keys, k - 1, slots, hooks,
                               executor, seq_log)
                waited = executor.wait_idle()
                if waited > 0:
                    seq_log.violations.append(Violation(
                        segment_index=k - 1, kind="callback-overrun",
                        overrun_s=waited))
            seq_log.callbacks.append(("after", n))
            _item_after(items[-1])
        finally:
            if own_executor:
                executor.shutdown()
        seq_log.end_frame = clock.frame
        return seq_log

    __call__ = run

    def _slot_work(self, seq_log: SequenceLog, items, k: int):
        """Work scheduled during item k's frames: after(k-1) then before(k+1)."""
        n = len(items)

        def work():
            seq_log.callbacks.append(("after", k - 1))
            if k >= 2:
                _item_after(items[k - 2])
            if k < n:
                seq_log.callbacks.append(("before", k + 1))
                _item_before(items[k])

        return work

    def _run_item(self, item, clock, keys, index, slot_work, hooks, executor,
                  seq_log: SequenceLog):
        if isinstance(item, Sequence):
            # a nested sequence hosts the parent slots over its frames;
            # submit at its boundary so the worker overlaps its flips
            executor.submit(slot_work)
            child_log = item.run(clock, keys, _executor=executor,
                                 _frame_hooks=hooks)
            seq_log.merge_child(child_log)
        else:
            seg_log = item.run_body(
                clock, keys, index,
                slot_work=lambda: executor.submit(slot_work),
                frame_hooks=hooks)
            seq_log.segments.append(seg_log)


def _item_before(item) -> None:
    item.before()


def _item_after(item) -> None:
    item.after()


def run_sequence(seq: Sequence, clock, keys: KeyChannel | None = None
                 ) -> SequenceLog:
    return seq.run(clock, keys)


class LoopingSequence(Sequence):
    """Repeats its items until a stop signal or a stop key arrives."""

    def __init__(self, items, stop=None, stop_keys=None, name: str = "loop",
                 **kwargs):
        super().__init__(items, name=name, **kwargs)
        self.stop = stop
        self.stop_keys = set(stop_keys) if stop_keys else None
        self.iterations = 0

    def _should_stop(self, clock, last_log: SequenceLog | None) -> bool:
        if self.stop is not None:
            if isinstance(self.stop, threading.Event):
                if self.stop.is_set():
                    return True
            elif self.stop(clock):
                return True
        if self.stop_keys and last_log is not None:
            for seg in last_log.segments:
                if any(k.key in self.stop_keys for k in seg.keys):
                    return True
        return False

    def run(self, clock, keys: KeyChannel | None = None,
            _executor: _SlotExecutor | None = None,
            _frame_hooks: tuple = ()) -> SequenceLog:
        own_executor = _executor is None
        executor = _executor or _SlotExecutor(inline=(clock.mode == "simulated"))
        combined = SequenceLog(name=self.name, start_frame=clock.frame)
        self.iterations = 0
        last: SequenceLog | None = None
        try:
            while not self._should_stop(clock, last):
                last = super().run(clock, keys, _executor=executor,
                                   _frame_hooks=_frame_hooks)
                combined.merge_child(last)
                combined.callbacks.extend(last.callbacks)
                self.iterations += 1
        finally:
            if own_executor:
                executor.shutdown()
        combined.end_frame = clock.frame
        return combined

    __call__ = run


class ThreadLoopingSequence(Sequence):
    """Runs a background task and repeats its items until the task completes.

    Single-use: the sequence is tied to its task and cannot run again after
    the task has terminated.
    """

    def __init__(self, task, items, name: str = "task-loop", **kwargs):
        super().__init__(items, name=name, **kwargs)
        if isinstance(task, threading.Thread):
            self.task = task
        else:
            self.task = threading.Thread(target=task, daemon=True)
        self.iterations = 0
        self._consumed = False

    def run(self, clock, keys: KeyChannel | None = None,
            _executor: _SlotExecutor | None = None,
            _frame_hooks: tuple = ()) -> SequenceLog:
        if self._consumed:
            raise SequenceConsumedError(
                f"{self.name} is tied to a finished task and cannot be reused")
        self._consumed = True
        own_executor = _executor is None
        executor = _executor or _SlotExecutor(inline=(clock.mode == "simulated"))
        combined = SequenceLog(name=self.name, start_frame=clock.frame)
        self.iterations = 0
        try:
            self.task.start()
            while self.task.is_alive():
                last = super().run(clock, keys, _executor=executor,
                                   _frame_hooks=_frame_hooks)
                combined.merge_child(last)
                combined.callbacks.extend(last.callbacks)
                self.iterations += 1
            self.task.join()
        finally:
            if own_executor:
                executor.shutdown()
        combined.end_frame = clock.frame
        return combined

    __call__ = run
