"""Discrete-event kernel: integer-minute clock, event calendar, named random
streams and FIFO capacity-constrained resources.

Time is kept as integer minutes since the start of a run so that event
ordering never depends on floating point rounding.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

MINUTES_PER_DAY = 1440
MINUTES_PER_HOUR = 60

SimTime = int


class TimeInPast(ValueError):
    """Raised when something is scheduled before the current clock."""


class UnknownEventKind(KeyError):
    """Raised when a popped event has no registered handler."""


def days(n: float) -> SimTime:
    return int(round(n * MINUTES_PER_DAY))


@dataclass
class EventRecord:
    kind: str
    subject: str
    payload: dict = field(default_factory=dict)
    time: SimTime = 0
    id: int = -1

    def to_line(self) -> str:
        payload = json.dumps(self.payload, sort_keys=True, separators=(",", ":"))
        return f"{self.id}\t{self.time}\t{self.kind}\t{self.subject}\t{payload}"

    @classmethod
    def from_line(cls, line: str) -> "EventRecord":
        rid, time, kind, subject, payload = line.rstrip("\n").split("\t", 4)
        return cls(kind=kind, subject=subject, payload=json.loads(payload),
                   time=int(time), id=int(rid))


class EventCalendar:
    """Pending events ordered by (time, insertion sequence)."""

    def __init__(self, now: SimTime = 0):
        self.now = now
        self._heap: list = []
        self._seq = 0
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: SimTime, record: EventRecord) -> int:
        if time < self.now:
            raise TimeInPast(f"cannot schedule at t={time} when now={self.now}")
        record.time = int(time)
        if record.id < 0:
            record.id = self._next_id
            self._next_id += 1
        heapq.heappush(self._heap, (record.time, self._seq, record))
        self._seq += 1
        return record.id

    def peek_time(self) -> Optional[SimTime]:
        return self._heap[0][0] if self._heap else None

    def pop(self) -> EventRecord:
        time, _, record = heapq.heappop(self._heap)
        self.now = time
        return record

    def pending(self) -> list[EventRecord]:
        return [item[2] for item in sorted(self._heap)]


def schedule_event(calendar: EventCalendar, time: SimTime, record: EventRecord) -> int:
    return calendar.push(time, record)


Handler = Callable[[EventRecord], Optional[Iterable[EventRecord]]]


def run_until(calendar: EventCalendar, handlers: Mapping[str, Handler],
              t_end: SimTime) -> list[EventRecord]:
    """Process every pending event with time <= t_end.

    Handlers receive the popped record and return the records they want
    scheduled; each returned record must carry its own ``time``.  The clock is
    left at ``t_end``.
    """
    trace: list[EventRecord] = []
    heap = calendar._heap
    while heap and heap[0][0] <= t_end:
        record = calendar.pop()
        handler = handlers.get(record.kind)
        if handler is None:
            raise UnknownEventKind(record.kind)
        trace.append(record)
        spawned = handler(record)
        if spawned:
            for new in spawned:
                calendar.push(new.time, new)
    calendar.now = max(calendar.now, t_end)
    return trace


def write_trace(records: Iterable[EventRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(record.to_line() + "\n")


def read_trace(path) -> list[EventRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EventRecord.from_line(line) for line in fh if line.strip()]


def serialize_trace(records: Iterable[EventRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


def stream_seed(master_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}|{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Reproducible random stream identified by ``(master_seed, label)``."""

    def __init__(self, master_seed: int, label: str):
        if not label:
            raise ValueError("stream label must be non-empty")
        self.label = label
        self.master_seed = int(master_seed)
        self.seed = stream_seed(master_seed, label)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:
        return f"RngStream({self.master_seed}, {self.label!r})"

    def child(self, suffix: str) -> "RngStream":
        return RngStream(self.master_seed, f"{self.label}/{suffix}")

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * self.generator.random()

    def uniforms(self, size) -> np.ndarray:
        return self.generator.random(size)

    def bernoulli(self, p: float) -> bool:
        return self.generator.random() < p

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the half-open range [lo, hi)."""
        return int(self.generator.integers(lo, hi))

    def categorical(self, weights: Sequence[float]) -> int:
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"bad categorical weights: {weights!r}")
        cdf = np.cumsum(w / w.sum())
        idx = int(np.searchsorted(cdf, self.generator.random(), side="right"))
        return min(idx, len(w) - 1)


def derive_stream(master_seed: int, label: str) -> RngStream:
    return RngStream(master_seed, label)


class FifoResource:
    """A ``capacity``-server queue served strictly in arrival order.

    ``open_at(t, duration)`` may map a candidate start to the earliest time at
    which a service of ``duration`` fits inside opening hours.
    """

    def __init__(self, capacity: int,
                 open_at: Optional[Callable[[SimTime, int], SimTime]] = None):
        if capacity < 1:
            raise ValueError("capacity must be a positive integer")
        self.capacity = capacity
        self.busy_until: list[SimTime] = [0] * capacity
        self.open_at = open_at
        self.queue: list[tuple[Any, SimTime, SimTime, int]] = []
        self._last_arrival: SimTime = 0
        self._last_grant: SimTime = 0

    def peek(self, at: SimTime, service: int) -> SimTime:
        slot = min(range(self.capacity), key=self.busy_until.__getitem__)
        start = max(at, self.busy_until[slot], self._last_grant)
        if self.open_at is not None:
            start = self.open_at(start, service)
        return start

    def request(self, requester: Any, at: SimTime, service: int) -> SimTime:
        if at < self._last_arrival:
            raise TimeInPast(f"request at {at} precedes previous arrival {self._last_arrival}")
        slot = min(range(self.capacity), key=self.busy_until.__getitem__)
        start = max(at, self.busy_until[slot], self._last_grant)
        if self.open_at is not None:
            start = self.open_at(start, service)
        self.busy_until[slot] = start + service
        self._last_arrival = at
        self._last_grant = start
        self.queue.append((requester, at, start, service))
        return start

    def holders_at(self, t: SimTime) -> int:
        return sum(1 for _, _, start, service in self.queue if start <= t < start + service)


def fifo_request(resource: FifoResource, requester: Any, at: SimTime,
                 service: int = 30) -> SimTime:
    return resource.request(requester, at, service)
