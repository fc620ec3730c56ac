"""Per-task launcher behind a global concurrency ceiling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .base import BackendFamily, SimBackend, SubState, Submission, place_locality

DEFAULT_CAP = 112


@dataclass
class CapState:
    """Cap slots are held from launch until the task completes.

    Launches go through one launcher, so they are serialized by
    ``launch_latency``.
    """

    cap: int = DEFAULT_CAP
    launch_latency: float = 0.05
    in_flight: int = 0
    wait_queue: deque = field(default_factory=deque)
    launcher_free_at: float = 0.0

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError("cap must be positive")
        if self.launch_latency < 0:
            raise ValueError("launch_latency must be >= 0")

    def _launch(self, now: float) -> float:
        self.in_flight += 1
        at = max(now, self.launcher_free_at) + self.launch_latency
        self.launcher_free_at = at
        return at

    def try_launch(self, item: Any, now: float, place: Callable[[Any], bool] | None = None) -> float | None:
        """Launch time, or ``None`` if the item joined the wait queue."""
        if self.wait_queue or self.in_flight >= self.cap or (place is not None and not place(item)):
            self.wait_queue.append(item)
            return None
        return self._launch(now)

    def on_task_complete(self, now: float, place: Callable[[Any], bool] | None = None) -> list[tuple[Any, float]]:
        if self.in_flight <= 0:
            raise RuntimeError("completion without a launch")
        self.in_flight -= 1
        return self.drain(now, place)

    def drain(self, now: float, place: Callable[[Any], bool] | None = None) -> list[tuple[Any, float]]:
        out = []
        while self.wait_queue and self.in_flight < self.cap:
            head = self.wait_queue[0]
            if place is not None and not place(head):
                break
            self.wait_queue.popleft()
            out.append((head, self._launch(now)))
        return out

    def withdraw(self, item: Any) -> bool:
        try:
            self.wait_queue.remove(item)
            return True
        except ValueError:
            return False


class CappedBackend(SimBackend):
    family = BackendFamily.CAPPED

    def __init__(self, instance_id, partition, params=None, clock=None, cap: int = DEFAULT_CAP,
                 latency_per_node_s: float = 0.0, **kw):
        super().__init__(instance_id, partition, params, clock, **kw)
        latency = self.params.launch_latency_s + latency_per_node_s * len(partition.node_ids)
        self.state = CapState(cap=cap, launch_latency=latency)

    def _place(self, sub: Submission) -> bool:
        d = sub.desc
        a = self.slotmap.acquire(sub.id, d.cores, d.gpus, place_locality(self, d))
        if a is None:
            return False
        sub.assignment = a
        return True

    def _enqueue(self, sub: Submission) -> None:
        at = self.state.try_launch(sub, self.clock.now, self._place)
        if at is not None:
            self._run(sub, at)

    def _abort(self, sub: Submission) -> None:
        if sub.state is SubState.QUEUED:
            self.state.withdraw(sub)
        elif sub.state in (SubState.LAUNCHING, SubState.RUNNING):
            self.state.in_flight -= 1

    def _cancel(self, sub: Submission) -> None:
        super()._cancel(sub)
        self._pump()

    def _complete(self, sub: Submission) -> None:
        super()._complete(sub)
        for nxt, at in self.state.on_task_complete(self.clock.now, self._place):
            self._run(nxt, at)

    def _pump(self) -> None:
        for nxt, at in self.state.drain(self.clock.now, self._place):
            self._run(nxt, at)
