"""Event streams and their projection into 3-channel slice images.

A slice image holds, per pixel, the mean normalized timestamp of the events
that fired inside the slice window plus the positive and negative event
counts.  Up to five consecutive slices are stacked to form one network input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Event",
    "EventStream",
    "SliceImage",
    "SliceStack",
    "slice_events",
    "build_slice_image",
    "build_stack",
    "event_pixel_fraction",
    "slice_to_tensor",
    "stack_to_tensor",
    "read_events",
    "write_events",
    "FormatError",
]

EVT1_MAGIC = b"EVT1"
_EVT1_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "V3")])


class FormatError(ValueError):
    """Raised on malformed EVT1 files; carries the offending byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Event:
    """A single sensor event: time in seconds, pixel position, signed polarity."""

    t: float
    x: int
    y: int
    polarity: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"negative timestamp {self.t}")
        if self.polarity not in (-1, 1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative pixel coordinate ({self.x}, {self.y})")


@dataclass(frozen=True)
class EventStream:
    """A time-ordered batch of events, stored as column arrays.

    t is float64 seconds, x/y are int32 pixel coordinates, polarity is int8
    with values in {+1, -1}.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int32))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int32))
        object.__setattr__(self, "polarity", np.asarray(self.polarity, dtype=np.int8))
        n = self.t.size
        if not (self.x.size == self.y.size == self.polarity.size == n):
            raise ValueError("column arrays must have equal length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events must be sorted by non-decreasing timestamp")
            if np.any(self.t < 0):
                raise ValueError("negative timestamps")
            if np.any((self.x < 0) | (self.x >= self.width)):
                raise ValueError("x coordinate out of bounds")
            if np.any((self.y < 0) | (self.y >= self.height)):
                raise ValueError("y coordinate out of bounds")
            if np.any(np.abs(self.polarity) != 1):
                raise ValueError("polarity must be +1 or -1")
        for arr in (self.t, self.x, self.y, self.polarity):
            arr.setflags(write=False)

    def __len__(self):
        return int(self.t.size)

    @classmethod
    def from_events(cls, width, height, events):
        events = list(events)
        return cls(
            width,
            height,
            np.array([e.t for e in events], dtype=np.float64),
            np.array([e.x for e in events], dtype=np.int32),
            np.array([e.y for e in events], dtype=np.int32),
            np.array([e.polarity for e in events], dtype=np.int8),
        )

    def to_events(self):
        return [
            Event(float(t), int(x), int(y), int(p))
            for t, x, y, p in zip(self.t, self.x, self.y, self.polarity)
        ]

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.polarity, other.polarity)
        )


@dataclass(frozen=True)
class SliceImage:
    """Projection of one slice window [t0, t0+dt) onto the pixel grid."""

    width: int
    height: int
    time_avg: np.ndarray  # (H, W) float64 in [0, 1]; 0 where no events fired
    pos_count: np.ndarray  # (H, W) int64
    neg_count: np.ndarray  # (H, W) int64
    t0: float
    dt: float

    def event_count(self):
        return self.pos_count + self.neg_count


@dataclass(frozen=True)
class SliceStack:
    """n consecutive slice images; the middle one is the reference slice."""

    slices: tuple
    middle_index: int = field(init=False)

    def __post_init__(self):
        slices = tuple(self.slices)
        if not 1 <= len(slices) <= 5:
            raise ValueError(f"stack must hold 1..5 slices, got {len(slices)}")
        for a, b in zip(slices, slices[1:]):
            if not np.isclose(a.t0 + a.dt, b.t0):
                raise ValueError("slices must be contiguous in time")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "middle_index", len(slices) // 2)

    def __len__(self):
        return len(self.slices)

    @property
    def middle(self):
        return self.slices[self.middle_index]


def slice_events(stream: EventStream, t0: float, dt: float) -> EventStream:
    """Return the sub-stream with t0 <= t < t0 + dt (half-open window)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    lo = np.searchsorted(stream.t, t0, side="left")
    hi = np.searchsorted(stream.t, t0 + dt, side="left")
    return EventStream(
        stream.width,
        stream.height,
        stream.t[lo:hi],
        stream.x[lo:hi],
        stream.y[lo:hi],
        stream.polarity[lo:hi],
    )


def build_slice_image(events: EventStream, t0: float, dt: float) -> SliceImage:
    """Accumulate events into time-average and polarity-count channels.

    All events must lie inside [t0, t0+dt); timestamps are normalized to
    [0, 1] by (t - t0) / dt before averaging.  Pixels with no events keep
    time_avg exactly zero.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    h, w = events.height, events.width
    if len(events):
        bad = np.flatnonzero((events.t < t0) | (events.t >= t0 + dt))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"event {i} at t={events.t[i]} outside window [{t0}, {t0 + dt})"
            )
    flat = events.y.astype(np.int64) * w + events.x.astype(np.int64)
    pos = np.bincount(flat[events.polarity > 0], minlength=h * w)
    neg = np.bincount(flat[events.polarity < 0], minlength=h * w)
    tsum = np.bincount(flat, weights=(events.t - t0) / dt, minlength=h * w)
    count = pos + neg
    time_avg = np.divide(tsum, count, out=np.zeros(h * w), where=count > 0)
    return SliceImage(
        width=w,
        height=h,
        time_avg=time_avg.reshape(h, w),
        pos_count=pos.reshape(h, w),
        neg_count=neg.reshape(h, w),
        t0=float(t0),
        dt=float(dt),
    )


def build_stack(stream: EventStream, t_start: float, dt: float, n: int) -> SliceStack:
    """Build n contiguous slices starting at t_start, each of width dt."""
    if not 1 <= n <= 5:
        raise ValueError(f"n must be in 1..5, got {n}")
    slices = []
    for k in range(n):
        t0 = t_start + k * dt
        slices.append(build_slice_image(slice_events(stream, t0, dt), t0, dt))
    return SliceStack(tuple(slices))


def event_pixel_fraction(sl: SliceImage) -> float:
    """Fraction of pixels that saw at least one event."""
    return float(np.count_nonzero(sl.event_count()) / (sl.width * sl.height))


def slice_to_tensor(sl: SliceImage) -> np.ndarray:
    """3-channel float network input: time image plus count channels.

    Each count channel is scaled by the slice's maximum count (min 1) so
    every channel lands in [0, 1].
    """
    scale = max(1, int(max(sl.pos_count.max(initial=0), sl.neg_count.max(initial=0))))
    return np.stack(
        [
            sl.time_avg,
            sl.pos_count / scale,
            sl.neg_count / scale,
        ]
    ).astype(np.float64)


def stack_to_tensor(stack: SliceStack) -> np.ndarray:
    """Concatenate all slice channels: (3 * n, H, W)."""
    return np.concatenate([slice_to_tensor(s) for s in stack.slices], axis=0)


def write_events(stream: EventStream, path) -> None:
    """Write the EVT1 binary format (timestamps quantized to microseconds)."""
    rec = np.zeros(len(stream), dtype=_EVT1_RECORD)
    rec["t"] = np.round(stream.t * 1e6).astype(np.uint64)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.polarity
    with open(path, "wb") as f:
        f.write(EVT1_MAGIC)
        f.write(struct.pack("<IIQ", stream.width, stream.height, len(stream)))
        f.write(rec.tobytes())


def read_events(path) -> EventStream:
    """Read an EVT1 file, validating magic, record count and field ranges."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != EVT1_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 20:
        raise FormatError("truncated header", offset=len(blob))
    width, height, count = struct.unpack_from("<IIQ", blob, 4)
    body = blob[20:]
    if len(body) != count * 16:
        raise FormatError(
            f"expected {count} 16-byte records, got {len(body)} bytes of payload",
            offset=20 + (len(body) // 16) * 16,
        )
    rec = np.frombuffer(body, dtype=_EVT1_RECORD)
    bad_pol = np.flatnonzero(np.abs(rec["p"].astype(np.int32)) != 1)
    if bad_pol.size:
        raise FormatError(
            f"polarity must be +1 or -1, got {rec['p'][bad_pol[0]]}",
            offset=20 + int(bad_pol[0]) * 16 + 12,
        )
    t = rec["t"].astype(np.float64) / 1e6
    if t.size and np.any(np.diff(rec["t"].astype(np.int64)) < 0):
        i = int(np.flatnonzero(np.diff(rec["t"].astype(np.int64)) < 0)[0]) + 1
        raise FormatError("timestamps not sorted", offset=20 + i * 16)
    try:
        return EventStream(width, height, t, rec["x"], rec["y"], rec["p"])
    except ValueError as e:
        raise FormatError(str(e), offset=20) from e
