"""The contract every executor backend implements, plus shared sim plumbing."""

from __future__ import annotations

import itertools
import logging
import math
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar

from ..core import Modality, Task, TaskDescription
from ..resources import NeverFits, Partition, SlotAssignment

log = logging.getLogger(__name__)

# Zero-duration tasks finish this long after they start so RUNNING < DONE.
NULL_EPSILON = 1e-3


class BackendFamily(str, Enum):
    CAPPED = "capped"
    HIERARCHICAL = "hierarchical"
    WORKERPOOL = "workerpool"


@dataclass(frozen=True)
class BackendDescriptor:
    family: BackendFamily
    supports_exec: bool
    supports_func: bool
    supports_multinode: bool
    supports_partitioning: bool

    def supports(self, modality: Modality) -> bool:
        return self.supports_exec if modality is Modality.EXECUTABLE else self.supports_func


DESCRIPTORS = {
    BackendFamily.CAPPED: BackendDescriptor(BackendFamily.CAPPED, True, False, True, False),
    BackendFamily.HIERARCHICAL: BackendDescriptor(BackendFamily.HIERARCHICAL, True, False, True, True),
    BackendFamily.WORKERPOOL: BackendDescriptor(BackendFamily.WORKERPOOL, True, True, False, False),
}


class Lifecycle(str, Enum):
    BOOTING = "BOOTING"
    READY = "READY"
    FAILED = "FAILED"
    STOPPED = "STOPPED"


class EventKind(str, Enum):
    READY = "READY"
    TASK_RUNNING = "TASK_RUNNING"
    TASK_DONE = "TASK_DONE"
    TASK_FAILED = "TASK_FAILED"
    TASK_CANCELED = "TASK_CANCELED"
    CAPACITY_FREED = "CAPACITY_FREED"
    INSTANCE_FAILED = "INSTANCE_FAILED"


TERMINAL_KINDS = frozenset({EventKind.TASK_DONE, EventKind.TASK_FAILED, EventKind.TASK_CANCELED})


@dataclass(frozen=True)
class BackendEvent:
    kind: EventKind
    ts: float
    uid: str | None = None
    detail: str = ""
    submission_id: str | None = None


DEFAULT_BOOTSTRAP_S = {
    BackendFamily.CAPPED: 0.0,
    BackendFamily.HIERARCHICAL: 20.0,
    BackendFamily.WORKERPOOL: 9.0,
}
DEFAULT_LAUNCH_LATENCY_S = {
    BackendFamily.CAPPED: 0.05,
    BackendFamily.HIERARCHICAL: 0.01,
    BackendFamily.WORKERPOOL: 0.002,
}


@dataclass
class BackendParams:
    bootstrap_s: float = 0.0
    launch_latency_s: float = 0.0
    startup_timeout_s: float = 60.0
    bootstrap_jitter: float = 0.0

    def __post_init__(self):
        for name in ("bootstrap_s", "launch_latency_s", "startup_timeout_s", "bootstrap_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def defaults(cls, family: BackendFamily) -> "BackendParams":
        return cls(DEFAULT_BOOTSTRAP_S[family], DEFAULT_LAUNCH_LATENCY_S[family])


class Rejected(Exception):
    def __init__(self, reason: str, message: str = ""):
        super().__init__(f"{reason}: {message}" if message else reason)
        self.reason = reason


class UnknownSubmission(KeyError):
    pass


class AlreadyTerminal(RuntimeError):
    pass


class SubState(str, Enum):
    QUEUED = "queued"
    LAUNCHING = "launching"
    RUNNING = "running"
    TERMINAL = "terminal"


@dataclass
class Submission:
    id: str
    desc: TaskDescription
    state: SubState = SubState.QUEUED
    assignment: SlotAssignment | None = None
    started: float | None = None
    worker: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def uid(self) -> str:
        return self.desc.uid


def running_detail(sub: Submission) -> str:
    a = sub.assignment
    cores = a.cores if a is not None else sub.desc.cores
    gpus = a.gpus if a is not None else sub.desc.gpus
    text = f"sub={sub.id} cores={cores} gpus={gpus}"
    if sub.worker is not None:
        text += f" worker={sub.worker}"
    return text


class BackendInstance:
    """Shared bookkeeping: lifecycle, submissions, and the pull-based outbox."""

    family: ClassVar[BackendFamily]

    def __init__(self, instance_id: str, partition: Partition, params: BackendParams | None = None):
        self.id = instance_id
        self.partition = partition
        self.params = params or BackendParams.defaults(self.family)
        self.descriptor = DESCRIPTORS[self.family]
        self.lifecycle = Lifecycle.BOOTING
        self.bootstrap_started: float | None = None
        self.bootstrap_ready: float | None = None
        self.failure: str | None = None
        self.submissions: dict[str, Submission] = {}
        self._sub_seq = itertools.count()
        self._outbox: deque[BackendEvent] = deque()
        self._lock = threading.RLock()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id} {self.lifecycle.value} nodes={self.partition.node_ids}>"

    @property
    def slotmap(self):
        return self.partition.slotmap

    def now(self) -> float:
        raise NotImplementedError

    # -- contract -------------------------------------------------------------

    def bootstrap(self, now: float | None = None) -> None:
        raise NotImplementedError

    def submit(self, task: Task | TaskDescription) -> str:
        desc = task.desc if isinstance(task, Task) else task
        with self._lock:
            if self.lifecycle is not Lifecycle.READY:
                raise Rejected("NotReady", f"{self.id} is {self.lifecycle.value}")
            if not self.descriptor.supports(desc.modality):
                raise Rejected("UnsupportedModality", f"{self.family.value} cannot run {desc.modality.value}")
            if not self.can_ever_fit(desc):
                raise Rejected("NeverFits", f"{desc.uid} needs {desc.cores}c/{desc.gpus}g")
            sub = Submission(f"{self.id}.{next(self._sub_seq)}", desc)
            self.submissions[sub.id] = sub
            self._enqueue(sub)
            return sub.id

    def poll_events(self, up_to: float = math.inf) -> list[BackendEvent]:
        out = []
        with self._lock:
            while self._outbox and self._outbox[0].ts <= up_to:
                out.append(self._outbox.popleft())
        return out

    def cancel(self, submission_id: str) -> None:
        with self._lock:
            sub = self.submissions.get(submission_id)
            if sub is None:
                raise UnknownSubmission(submission_id)
            if sub.state is SubState.TERMINAL:
                raise AlreadyTerminal(submission_id)
            self._cancel(sub)

    def fail(self, cause: str) -> None:
        """Crash the instance: every owned submission fails, then the instance."""
        with self._lock:
            if self.lifecycle in (Lifecycle.FAILED, Lifecycle.STOPPED):
                return
            self.lifecycle = Lifecycle.FAILED
            self.failure = cause
            now = self.now()
            for sub in self.submissions.values():
                if sub.state is not SubState.TERMINAL:
                    self._abort(sub)
                    self._finish(sub, EventKind.TASK_FAILED, f"InstanceFailed: {cause}", now, free=False)
            self.emit(EventKind.INSTANCE_FAILED, now, detail=cause)

    def stop(self) -> None:
        with self._lock:
            if self.lifecycle is Lifecycle.READY:
                self.lifecycle = Lifecycle.STOPPED

    # -- capability queries ---------------------------------------------------

    def supports(self, modality: Modality) -> bool:
        return self.descriptor.supports(modality)

    def can_ever_fit(self, desc: TaskDescription) -> bool:
        locality = desc.locality
        if not self.descriptor.supports_multinode:
            locality = 1
        return self.slotmap.fits_capacity(desc.cores, desc.gpus, locality)

    def outstanding(self) -> int:
        with self._lock:
            return sum(1 for s in self.submissions.values() if s.state is not SubState.TERMINAL)

    def owned_uids(self) -> list[str]:
        with self._lock:
            return [s.uid for s in self.submissions.values() if s.state is not SubState.TERMINAL]

    # -- helpers for subclasses -----------------------------------------------

    def emit(self, kind: EventKind, ts: float, uid: str | None = None, detail: str = "",
             sub: Submission | None = None) -> None:
        with self._lock:
            self._outbox.append(BackendEvent(kind, ts, uid, detail, sub.id if sub else None))

    def _finish(self, sub: Submission, kind: EventKind, detail: str, now: float, free: bool = True) -> None:
        had_slots = sub.assignment is not None
        if had_slots:
            self.slotmap.release(sub.assignment)
            sub.assignment = None
        sub.state = SubState.TERMINAL
        self.emit(kind, now, sub.uid, detail, sub)
        if had_slots and free:
            self.emit(EventKind.CAPACITY_FREED, now)
            self._slots_freed(now)

    def _enqueue(self, sub: Submission) -> None:
        raise NotImplementedError

    def _cancel(self, sub: Submission) -> None:
        raise NotImplementedError

    def _abort(self, sub: Submission) -> None:
        """Drop backend-internal references to a submission being failed."""

    def _slots_freed(self, now: float) -> None:
        """Hook run after a completion returns slots."""


class SimBackend(BackendInstance):
    """Backend driven by a shared :class:`~pilotrt.simclock.SimClock`."""

    def __init__(self, instance_id, partition, params=None, clock=None, seed: int = 0,
                 hang: bool = False, fail_at: float | None = None):
        super().__init__(instance_id, partition, params)
        if clock is None:
            raise ValueError("sim backends need a clock")
        self.clock = clock
        self._rng = random.Random(seed)
        self.hang = hang
        self.fail_at = fail_at

    def now(self) -> float:
        return self.clock.now

    def sample_bootstrap(self) -> float:
        base = self.params.bootstrap_s
        j = self.params.bootstrap_jitter
        if j > 0:
            base *= 1.0 + self._rng.uniform(-j, j)
        return base

    def bootstrap(self, now: float | None = None) -> None:
        now = self.clock.now if now is None else now
        self.lifecycle = Lifecycle.BOOTING
        self.bootstrap_started = now
        boot = math.inf if self.hang else self.sample_bootstrap()
        timeout = self.params.startup_timeout_s
        if boot > timeout:
            self.clock.schedule_at(now + timeout, self._boot_timeout)
        else:
            self.clock.schedule_at(now + boot, self._boot_done)
        if self.fail_at is not None:
            self.clock.schedule_at(max(self.fail_at, now), self.fail, "Crash")

    def _boot_done(self) -> None:
        if self.lifecycle is not Lifecycle.BOOTING:
            return
        self._on_ready()
        self.lifecycle = Lifecycle.READY
        self.bootstrap_ready = self.clock.now
        self.emit(EventKind.READY, self.clock.now)

    def _boot_timeout(self) -> None:
        if self.lifecycle is not Lifecycle.BOOTING:
            return
        self.lifecycle = Lifecycle.FAILED
        self.failure = "BootstrapTimeout"
        self.emit(EventKind.INSTANCE_FAILED, self.clock.now, detail="BootstrapTimeout")

    def _on_ready(self) -> None:
        """Build runtime state (worker tables etc.) at the end of bootstrap."""

    def _run(self, sub: Submission, start: float) -> None:
        """Schedule RUNNING at ``start`` and completion after the task's run time."""
        sub.state = SubState.LAUNCHING
        self.clock.schedule_at(start, self._start, sub)

    def _start(self, sub: Submission) -> None:
        if sub.state is not SubState.LAUNCHING:
            return
        now = self.clock.now
        sub.state = SubState.RUNNING
        sub.started = now
        self.emit(EventKind.TASK_RUNNING, now, sub.uid, running_detail(sub), sub)
        run = sub.desc.run_time
        self.clock.schedule_at(now + (run if run > 0 else NULL_EPSILON), self._end, sub)

    def _end(self, sub: Submission) -> None:
        if sub.state is not SubState.RUNNING:
            return
        self._complete(sub)

    def _complete(self, sub: Submission) -> None:
        kind, detail = EventKind.TASK_DONE, f"sub={sub.id}"
        if sub.desc.modality is Modality.FUNCTION and sub.desc.payload.startswith("fail"):
            kind, detail = EventKind.TASK_FAILED, f"sub={sub.id} ERR {sub.desc.payload}"
        self._finish(sub, kind, detail, self.clock.now)

    def _cancel(self, sub: Submission) -> None:
        self._abort(sub)
        self._finish(sub, EventKind.TASK_CANCELED, f"sub={sub.id} canceled", self.clock.now)


def place_locality(backend: BackendInstance, desc: TaskDescription) -> int | None:
    return desc.locality if backend.descriptor.supports_multinode else 1


__all__ = [
    "AlreadyTerminal", "BackendDescriptor", "BackendEvent", "BackendFamily", "BackendInstance",
    "BackendParams", "DESCRIPTORS", "EventKind", "Lifecycle", "NULL_EPSILON", "NeverFits",
    "Rejected", "SimBackend", "SubState", "Submission", "TERMINAL_KINDS", "UnknownSubmission",
    "place_locality", "running_detail",
]
