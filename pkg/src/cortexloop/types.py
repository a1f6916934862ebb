"""Domain types shared by the store, protocol, and processing layers."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import InvalidHeaderError


class DataKind(IntEnum):
    """Sample scalar type; the integer value is the wire code."""

    float32 = 0
    float64 = 1
    int16 = 2
    int32 = 3

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.name)

    @classmethod
    def from_dtype(cls, dtype) -> "DataKind":
        name = np.dtype(dtype).name
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unsupported sample dtype: {name!r}") from None


@dataclass
class StreamHeader:
    """Contract of one stream: geometry, rate, and running counters.

    ``n_samples_total`` / ``n_events_total`` are monotone between header
    resets; a fresh header always carries zeros.
    """

    n_channels: int
    sampling_rate_hz: float
    channel_labels: tuple[str, ...] | None = None
    data_kind: DataKind = DataKind.float32
    n_samples_total: int = 0
    n_events_total: int = 0

    def __post_init__(self):
        if self.channel_labels is not None:
            self.channel_labels = tuple(self.channel_labels)
        self.data_kind = DataKind(self.data_kind)

    def validate(self) -> None:
        if self.n_channels <= 0:
            raise InvalidHeaderError(f"n_channels must be positive, got {self.n_channels}")
        if not self.sampling_rate_hz > 0:
            raise InvalidHeaderError(f"sampling_rate_hz must be positive, got {self.sampling_rate_hz}")
        if self.channel_labels is not None:
            if len(self.channel_labels) != self.n_channels:
                raise InvalidHeaderError(
                    f"{len(self.channel_labels)} labels for {self.n_channels} channels")
            for lbl in self.channel_labels:
                if not lbl or "\x00" in lbl:
                    raise InvalidHeaderError("channel labels must be non-empty and NUL-free")
        if self.n_samples_total < 0 or self.n_events_total < 0:
            raise InvalidHeaderError("counters must be non-negative")

    def with_counters(self, n_samples: int, n_events: int) -> "StreamHeader":
        return dataclasses.replace(self, n_samples_total=n_samples, n_events_total=n_events)


@dataclass(eq=False)
class SampleBlock:
    """Contiguous (n_samples, n_channels) matrix anchored at an absolute index."""

    start_index: int
    data: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def end_index(self) -> int:
        return self.start_index + self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleBlock):
            return NotImplemented
        return (self.start_index == other.start_index
                and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and bool(np.array_equal(self.data, other.data)))


@dataclass(frozen=True)
class Event:
    """Typed marker anchored to an absolute sample index."""

    value: int
    sample: int
    kind: str = "marker"
    offset_samples: int = 0
    duration_samples: int = 0

    def __post_init__(self):
        if self.duration_samples < 0:
            raise ValueError("duration_samples must be non-negative")
        if self.sample < 0:
            raise ValueError("sample must be non-negative")


@dataclass
class Epoch:
    """Fixed-length window of samples with provenance.

    ``origin`` is the anchoring event's sample index for event-locked
    epochs and the window index for sliding epochs.  ``span`` is the
    half-open absolute sample range [begin, end).
    """

    data: np.ndarray
    label: int | None
    origin: int
    span: tuple[int, int]
    seq: int = 0
    emitted_at: float = 0.0  # time.monotonic() at emission

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]
