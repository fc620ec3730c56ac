"""Virtual time: an ordered pending-event set with insertion-order tie-breaking."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable


class PastTime(ValueError):
    pass


class Quiescent(Exception):
    """No pending events remain."""


@dataclass(order=True)
class PendingEvent:
    fire_at: float
    seq: int
    action: Callable[..., Any] = field(compare=False)
    args: tuple = field(default=(), compare=False)

    def fire(self):
        return self.action(*self.args)


class SimClock:
    def __init__(self, start: float = 0.0):
        self.now = float(start)
        self._heap: list[PendingEvent] = []
        self._seq = itertools.count()
        self.inserted = 0
        self.fired = 0

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def schedule_at(self, fire_at: float, action: Callable[..., Any], *args) -> int:
        if fire_at < self.now:
            raise PastTime(f"fire_at {fire_at!r} is before now {self.now!r}")
        seq = next(self._seq)
        heapq.heappush(self._heap, PendingEvent(float(fire_at), seq, action, args))
        self.inserted += 1
        return seq

    def schedule_in(self, delay: float, action: Callable[..., Any], *args) -> int:
        return self.schedule_at(self.now + delay, action, *args)

    def peek(self) -> float | None:
        return self._heap[0].fire_at if self._heap else None

    def advance(self) -> tuple[float, list[PendingEvent]]:
        """Jump to the earliest pending instant and pop everything due then.

        The returned events are in seq order; the caller fires them. Events
        scheduled for the same instant while firing are returned by the next
        call without moving time.
        """
        if not self._heap:
            raise Quiescent()
        t = self._heap[0].fire_at
        batch = []
        while self._heap and self._heap[0].fire_at == t:
            batch.append(heapq.heappop(self._heap))
        self.now = t
        self.fired += len(batch)
        return t, batch

    def step(self) -> float:
        t, batch = self.advance()
        for ev in batch:
            ev.fire()
        return t
