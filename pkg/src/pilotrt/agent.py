"""Pilot agent: routes tasks to backend instances and drives their state from backend events."""

from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from .backends.base import BackendFamily, BackendInstance, EventKind, Lifecycle, Rejected
from .core import InstanceState, Modality, Pilot, Task, TaskDescription, TaskState

log = logging.getLogger(__name__)

# One submission every ~5.7 ms: the agent's own serial dispatch cost.
DEFAULT_DISPATCH_LATENCY_S = 0.0057


class Selection(str, Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_LOADED = "least_loaded"


class StartBarrier(str, Enum):
    ALL_READY = "all_ready"
    PER_INSTANCE = "per_instance"


class NoEligibleBackend(Exception):
    pass


DEFAULT_RULES = {
    Modality.EXECUTABLE: (BackendFamily.HIERARCHICAL, BackendFamily.CAPPED),
    Modality.FUNCTION: (BackendFamily.WORKERPOOL,),
}


@dataclass
class RoutingPolicy:
    rules: dict = field(default_factory=lambda: dict(DEFAULT_RULES))
    selection: Selection = Selection.ROUND_ROBIN

    def families(self, modality: Modality) -> tuple[BackendFamily, ...]:
        return tuple(self.rules.get(modality, ()))


class Router:
    """Stateful instance selection. Deterministic for a given call sequence."""

    def __init__(self, policy: RoutingPolicy):
        self.policy = policy
        self._rr = {m: 0 for m in Modality}

    def eligible(self, desc: TaskDescription, instances: Sequence[BackendInstance]) -> list[BackendInstance]:
        fams = self.policy.families(desc.modality)
        return [b for b in instances
                if b.family in fams and b.supports(desc.modality)
                and b.lifecycle not in (Lifecycle.FAILED, Lifecycle.STOPPED)]

    def route(self, desc: TaskDescription, instances: Sequence[BackendInstance],
              load: Callable[[BackendInstance], float] | None = None) -> BackendInstance:
        pool = self.eligible(desc, instances)
        if not pool:
            raise NoEligibleBackend(f"no live {desc.modality.value} backend for {desc.uid}")
        fitting = [b for b in pool if b.can_ever_fit(desc)]
        if not fitting:
            raise NoEligibleBackend(f"NeverFits: {desc.uid} exceeds every eligible partition")
        if len(fitting) < len(pool):
            return max(fitting, key=lambda b: (b.slotmap.capacity_cores, b.slotmap.capacity_gpus))
        if self.policy.selection is Selection.LEAST_LOADED and load is not None:
            return min(fitting, key=lambda b: load(b) / max(b.slotmap.capacity_cores, 1))
        i = self._rr[desc.modality] % len(fitting)
        self._rr[desc.modality] += 1
        return fitting[i]


def route(task: Task | TaskDescription, policy: RoutingPolicy, instances: Sequence[BackendInstance]) -> str:
    desc = task.desc if isinstance(task, Task) else task
    return Router(policy).route(desc, instances).id


class Agent:
    """Accepts tasks, queues them per instance, and dispatches serially.

    With a sim ``clock`` dispatch is paced by ``dispatch_latency_s``; without
    one (real mode) queued tasks are submitted as soon as their instance is
    ready and ``time_fn`` supplies timestamps.
    """

    def __init__(self, pilot: Pilot, instances: Sequence[BackendInstance], policy: RoutingPolicy | None = None,
                 clock=None, time_fn: Callable[[], float] | None = None,
                 dispatch_latency_s: float = DEFAULT_DISPATCH_LATENCY_S,
                 start_barrier: StartBarrier | str = StartBarrier.ALL_READY, max_retries: int = 1):
        self.pilot = pilot
        self.instances = list(instances)
        self.by_id = {b.id: b for b in self.instances}
        self.policy = policy or RoutingPolicy()
        self.router = Router(self.policy)
        self.clock = clock
        self._time_fn = time_fn
        self.dispatch_latency_s = dispatch_latency_s
        self.start_barrier = StartBarrier(start_barrier)
        self.max_retries = max_retries
        self.queues: dict[str, deque[tuple[int, Task]]] = {b.id: deque() for b in self.instances}
        self.by_sub: dict[str, Task] = {}
        self.dropped = 0
        self.on_terminal: list[Callable[[Task, float], None]] = []
        self.on_capacity_freed: list[Callable[[BackendInstance, float], None]] = []
        self._seq = itertools.count()
        self._dispatch_free_at = 0.0
        self._tick_pending = False
        self._lock = threading.RLock()
        self._check_rules()

    def _check_rules(self) -> None:
        present = {b.family for b in self.instances}
        for m, fams in self.policy.rules.items():
            if fams and not present.intersection(fams):
                log.debug("no %s backend present for %s tasks", "/".join(f.value for f in fams), m.value)

    # -- time -----------------------------------------------------------------

    def now(self) -> float:
        if self.clock is not None:
            return self.clock.now
        if self._time_fn is not None:
            return self._time_fn()
        return 0.0

    # -- admission and routing ------------------------------------------------

    def bootstrap(self) -> None:
        now = self.now()
        for b in self.instances:
            self.pilot.record_instance(b.id, InstanceState.BOOTING, now, b.partition.id, b.family.value)
            b.bootstrap(now)

    def load(self, b: BackendInstance) -> float:
        return b.outstanding() + len(self.queues[b.id])

    def submit_workload(self, tasks: Iterable[Task | TaskDescription]) -> list[Task]:
        out = []
        with self._lock:
            now = self.now()
            for t in tasks:
                task = t if isinstance(t, Task) else self.pilot.validate_description(t, now)
                self._route_and_queue(task, now)
                out.append(task)
            self._kick()
        return out

    def _route_and_queue(self, task: Task, now: float, rerouted: bool = False) -> None:
        try:
            b = self.router.route(task.desc, self.instances, self.load)
        except NoEligibleBackend as exc:
            self._terminal(task, TaskState.FAILED, now, detail=f"NoEligibleBackend: {exc}")
            return
        if not rerouted:
            self.pilot.transition(task, TaskState.SCHEDULED, now, b.partition.id, b.id)
        task.instance_id = b.id
        task.partition_id = b.partition.id
        self.queues[b.id].append((next(self._seq), task))

    # -- dispatch -------------------------------------------------------------

    def barrier_open(self) -> bool:
        if self.start_barrier is StartBarrier.ALL_READY:
            return all(b.lifecycle is not Lifecycle.BOOTING for b in self.instances)
        return True

    def queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def _next_ready(self):
        best = None
        for b in self.instances:
            q = self.queues[b.id]
            if q and b.lifecycle is Lifecycle.READY and (best is None or q[0][0] < best[1][0][0]):
                best = (b, q)
        if best is None:
            return None
        b, q = best
        return b, q.popleft()[1]

    def _kick(self) -> None:
        if not self.barrier_open():
            return
        if self.clock is None or self.dispatch_latency_s <= 0:
            while self._dispatch_one():
                pass
            return
        if not self._tick_pending and self.queued():
            self._tick_pending = True
            self.clock.schedule_at(max(self.clock.now, self._dispatch_free_at), self._tick)

    def _tick(self) -> None:
        self._tick_pending = False
        with self._lock:
            if self._dispatch_one():
                self._dispatch_free_at = self.clock.now + self.dispatch_latency_s
                self._kick()

    def _dispatch_one(self) -> bool:
        nxt = self._next_ready()
        if nxt is None:
            return False
        b, task = nxt
        now = self.now()
        try:
            sid = b.submit(task)
        except Rejected as exc:
            if exc.reason == "NotReady":
                self._route_and_queue(task, now, rerouted=True)
            else:
                self._terminal(task, TaskState.FAILED, now, detail=str(exc))
            return True
        task.submission_id = sid
        self.by_sub[sid] = task
        self.pilot.transition(task, TaskState.SUBMITTED, now, b.partition.id, b.id, f"sub={sid}")
        return True

    # -- event consumption ----------------------------------------------------

    def pump_events(self, now: float | None = None) -> int:
        """Apply every pending backend event up to ``now``.

        Returns the number of task and instance events consumed; capacity
        hints are applied but not counted.
        """
        up_to = float("inf") if now is None else now
        with self._lock:
            batch = []
            for b in self.instances:
                batch.extend((ev.ts, i, b, ev) for i, ev in enumerate(b.poll_events(up_to)))
            batch.sort(key=lambda x: x[0])
            kick = False
            for _, _, b, ev in batch:
                kick |= self._apply(b, ev)
            if kick:
                self._kick()
            return sum(1 for *_, ev in batch if ev.kind is not EventKind.CAPACITY_FREED)

    def _apply(self, b: BackendInstance, ev) -> bool:
        kind = ev.kind
        if kind is EventKind.READY:
            self.pilot.record_instance(b.id, InstanceState.READY, ev.ts, b.partition.id, b.family.value)
            return True
        if kind is EventKind.INSTANCE_FAILED:
            self.pilot.record_instance(b.id, InstanceState.FAILED, ev.ts, b.partition.id, b.family.value, ev.detail)
            self.handle_instance_failure(b.id, ev.detail, ev.ts)
            return True
        if kind is EventKind.CAPACITY_FREED:
            for hook in self.on_capacity_freed:
                hook(b, ev.ts)
            return True
        task = self.by_sub.get(ev.submission_id) if ev.submission_id else None
        if task is None or task.uid != ev.uid:
            self.dropped += 1
            log.warning("dropping %s for unknown task %s", kind.value, ev.uid)
            return False
        if kind is EventKind.TASK_RUNNING:
            self.pilot.transition(task, TaskState.RUNNING, ev.ts, b.partition.id, b.id, ev.detail)
            return False
        state = {EventKind.TASK_DONE: TaskState.DONE, EventKind.TASK_FAILED: TaskState.FAILED,
                 EventKind.TASK_CANCELED: TaskState.CANCELED}[kind]
        del self.by_sub[ev.submission_id]
        self._terminal(task, state, ev.ts, b.partition.id, b.id, ev.detail)
        if state is TaskState.FAILED and (ev.detail or "").startswith("InstanceFailed"):
            self._retry(task, ev.ts)
        return True

    def _terminal(self, task: Task, state: TaskState, at: float, partition=None, backend=None, detail=None):
        self.pilot.transition(task, state, at, partition, backend, detail)
        for hook in self.on_terminal:
            hook(task, at)

    def _retry(self, task: Task, at: float) -> None:
        if task.retries >= self.max_retries:
            return
        root = task.origin or task.uid
        n = task.retries + 1
        desc = TaskDescription(**{**task.desc.__dict__, "uid": f"{root}.r{n}"})
        new = self.pilot.validate_description(desc, at)
        new.retries = n
        new.origin = root
        self._route_and_queue(new, at)

    def handle_instance_failure(self, instance_id: str, cause: str | None = None, at: float | None = None) -> None:
        """Re-route the failed instance's agent-side queue.

        Tasks it already owned fail through the backend's own TASK_FAILED
        events.
        """
        b = self.by_id[instance_id]
        at = self.now() if at is None else at
        if b.lifecycle not in (Lifecycle.FAILED, Lifecycle.STOPPED):
            b.fail(cause or "Failed")
        q = self.queues[instance_id]
        self.queues[instance_id] = deque()
        for _, task in q:
            self._route_and_queue(task, at, rerouted=True)

    def cancel(self, uid: str) -> None:
        with self._lock:
            task = self.pilot.registry[uid]
            if task.state.terminal:
                return
            if task.submission_id and task.submission_id in self.by_sub:
                self.by_sub_backend(task).cancel(task.submission_id)
                return
            for iid, q in self.queues.items():
                for entry in q:
                    if entry[1] is task:
                        q.remove(entry)
                        self._terminal(task, TaskState.CANCELED, self.now(), detail="canceled before submit")
                        return

    def by_sub_backend(self, task: Task) -> BackendInstance:
        return self.by_id[task.instance_id]

    def idle(self) -> bool:
        return not self.queued() and not self.by_sub
