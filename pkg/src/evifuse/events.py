"""Event stream parsing, validation and windowing.

The on-disk format is plain CSV, one event per line: ``t_us,x,y,p`` with
microsecond integer timestamps. Polarity may be written {-1,1} or {0,1};
0 maps to -1 so both public conventions parse. Blank lines and lines
starting with '#' are skipped.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from operator import attrgetter

import numpy as np


class EventParseError(ValueError):
    """Malformed or out-of-bounds event line; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Event:
    t_us: int
    x: int
    y: int
    p: int  # -1 or +1


@dataclass(frozen=True)
class EventWindow:
    """Events with t_start_us <= t_us < t_end_us, sorted ascending by time."""

    events: tuple
    t_start_us: int
    t_end_us: int
    height: int
    width: int

    @property
    def count(self):
        return len(self.events)

    @property
    def duration_us(self):
        return self.t_end_us - self.t_start_us


def parse_events(stream, dims):
    """Parse and validate a CSV event stream; returns events sorted by time.

    ``stream`` is an iterable of text lines; ``dims`` is (height, width).
    The stable sort by timestamp is the canonical event order.
    """
    height, width = dims
    events = []
    for line_no, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split(",")
        if len(fields) != 4:
            raise EventParseError(line_no, f"expected 4 fields, got {len(fields)}")
        try:
            t_us, x, y, p = (int(f.strip()) for f in fields)
        except ValueError:
            raise EventParseError(line_no, f"non-numeric field in {text!r}") from None
        if t_us < 0:
            raise EventParseError(line_no, f"negative timestamp {t_us}")
        if not 0 <= x < width:
            raise EventParseError(line_no, f"x={x} outside [0, {width})")
        if not 0 <= y < height:
            raise EventParseError(line_no, f"y={y} outside [0, {height})")
        if p == 0:
            p = -1
        if p not in (-1, 1):
            raise EventParseError(line_no, f"polarity {p} not in {{-1, 0, 1}}")
        events.append(Event(t_us, x, y, p))
    events.sort(key=lambda e: e.t_us)  # stable: file order breaks ties
    return events


def serialize_events(events):
    """Inverse of parse_events for valid event lists."""
    return "".join(f"{e.t_us},{e.x},{e.y},{e.p}\n" for e in events)


def window(events, t_end_us, duration_us, dims):
    """Events in the half-open interval [t_end_us - duration_us, t_end_us)."""
    if duration_us <= 0:
        raise ValueError("window duration must be positive")
    height, width = dims
    t_start = t_end_us - duration_us
    stamps = [e.t_us for e in events]
    lo = bisect.bisect_left(stamps, t_start)
    hi = bisect.bisect_left(stamps, t_end_us)
    return EventWindow(
        events=tuple(events[lo:hi]),
        t_start_us=t_start,
        t_end_us=t_end_us,
        height=height,
        width=width,
    )


def events_to_arrays(events):
    """Columns (t_us, x, y, p) as int64 arrays; convenience for encoding."""
    if not events:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), z.copy(), z.copy()
    n = len(events)
    return tuple(
        np.fromiter(map(attrgetter(field), events), dtype=np.int64, count=n)
        for field in ("t_us", "x", "y", "p")
    )
