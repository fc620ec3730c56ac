"""Instance-level scheduler: FCFS with optional conservative backfill."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields
from enum import Enum
from typing import Iterable

import numpy as np

from ..core import Modality, Task, TaskDescription
from ..resources import SlotAssignment, SlotMap
from .base import (NULL_EPSILON, BackendFamily, EventKind, Lifecycle, Rejected, SimBackend, SubState,
                   Submission)


class QueuePolicy(str, Enum):
    FCFS = "fcfs"
    FCFS_BACKFILL = "backfill"


@dataclass(frozen=True)
class JobDescription:
    uid: str
    cores: int
    gpus: int = 0
    node_locality: int | None = None
    duration_hint: float | None = None
    payload: str = ""
    duration: float | None = None
    stage: str | None = None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'' if v is None else (repr(v) if isinstance(v, float) else v)}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "JobDescription":
        raw = dict(line.split("=", 1) for line in text.splitlines() if line)
        opt_int = lambda s: None if s == "" else int(s)  # noqa: E731
        opt_float = lambda s: None if s == "" else float(s)  # noqa: E731
        return cls(
            uid=raw["uid"],
            cores=int(raw["cores"]),
            gpus=int(raw["gpus"]),
            node_locality=opt_int(raw["node_locality"]),
            duration_hint=opt_float(raw["duration_hint"]),
            payload=raw["payload"],
            duration=opt_float(raw["duration"]),
            stage=raw["stage"] or None,
        )


def serialize_job(task: Task | TaskDescription) -> JobDescription:
    desc = task.desc if isinstance(task, Task) else task
    if desc.modality is not Modality.EXECUTABLE:
        raise Rejected("UnsupportedModality", f"{desc.uid} is {desc.modality.value}")
    return JobDescription(desc.uid, desc.cores, desc.gpus, desc.locality, desc.run_time,
                          desc.payload, desc.duration, desc.stage)


def deserialize_job(job: JobDescription) -> TaskDescription:
    return TaskDescription(job.uid, Modality.EXECUTABLE, job.cores, job.gpus, job.duration,
                           job.payload, job.node_locality, job.stage)


class InstanceQueue:
    def __init__(self, policy: QueuePolicy = QueuePolicy.FCFS_BACKFILL):
        self.policy = QueuePolicy(policy)
        self._q: deque[tuple[JobDescription, float, object]] = deque()

    def __len__(self) -> int:
        return len(self._q)

    def __iter__(self):
        return iter(self._q)

    def push(self, job: JobDescription, arrival: float, ref: object = None) -> None:
        self._q.append((job, arrival, ref))

    def head(self):
        return self._q[0]

    def popleft(self):
        return self._q.popleft()

    def remove_ref(self, ref: object) -> bool:
        for i, entry in enumerate(self._q):
            if entry[2] is ref:
                del self._q[i]
                return True
        return False

    def remove_at(self, idx: Iterable[int]) -> None:
        drop = set(idx)
        self._q = deque(e for i, e in enumerate(self._q) if i not in drop)


def _holder_key(job: JobDescription, ref) -> str:
    return getattr(ref, "id", None) or job.uid


def reservation(slotmap: SlotMap, job: JobDescription, running: Iterable[tuple[float | None, SlotAssignment]]):
    """Earliest time ``job`` fits given the known end times of running work.

    ``None`` when any running holder has no end estimate.
    """
    ends = list(running)
    if any(e is None for e, _ in ends):
        return None
    fc = slotmap.free_cores.copy()
    fg = slotmap.free_gpus.copy()
    for end, a in sorted(ends, key=lambda x: x[0]):
        for node, (c, g) in a.nodes.items():
            i = slotmap.index_of(node)
            fc[i] += c
            fg[i] += g
        if slotmap.plan(job.cores, job.gpus, job.node_locality, fc, fg) is not None:
            return end
    return None


def schedule_step(queue: InstanceQueue, slotmap: SlotMap, now: float,
                  running: list[tuple[float | None, SlotAssignment]] | None = None):
    """One scheduling pass.

    Returns ``(placed, never_fits)``: ``placed`` lists ``(job, ref, assignment)``
    in start order; ``never_fits`` lists ``(job, ref)`` ejected because the
    slot map could never hold them. ``running`` holds ``(end, assignment)``
    pairs for work occupying slots; placed jobs are appended to it.
    """
    running = [] if running is None else running
    placed, never = [], []
    while len(queue):
        job, _, ref = queue.head()
        if not slotmap.fits_capacity(job.cores, job.gpus, job.node_locality):
            queue.popleft()
            never.append((job, ref))
            continue
        a = slotmap.acquire(_holder_key(job, ref), job.cores, job.gpus, job.node_locality)
        if a is None:
            break
        queue.popleft()
        placed.append((job, ref, a))
        running.append((None if job.duration_hint is None else now + job.duration_hint, a))

    if len(queue) < 2 or queue.policy is not QueuePolicy.FCFS_BACKFILL:
        return placed, never
    if not np.any(slotmap.free_cores > 0):
        return placed, never
    head = queue.head()[0]
    limit = reservation(slotmap, head, running)
    if limit is None:
        return placed, never

    taken = []
    failed_shapes = set()
    for idx, (job, _, ref) in enumerate(queue):
        if idx == 0 or job.duration_hint is None or now + job.duration_hint > limit:
            continue
        shape = (job.cores, job.gpus, job.node_locality)
        if shape in failed_shapes:
            continue
        if not slotmap.fits_capacity(*shape):
            never.append((job, ref))
            taken.append(idx)
            continue
        a = slotmap.acquire(_holder_key(job, ref), *shape)
        if a is None:
            failed_shapes.add(shape)
            continue
        taken.append(idx)
        placed.append((job, ref, a))
        running.append((now + job.duration_hint, a))
        if not np.any(slotmap.free_cores > 0):
            break
    queue.remove_at(taken)
    return placed, never


class HierarchicalBackend(SimBackend):
    family = BackendFamily.HIERARCHICAL

    def __init__(self, instance_id, partition, params=None, clock=None,
                 policy: QueuePolicy | str = QueuePolicy.FCFS_BACKFILL, **kw):
        super().__init__(instance_id, partition, params, clock, **kw)
        self.queue = InstanceQueue(QueuePolicy(policy))
        self._launcher_free_at = 0.0
        self._pass_pending = False
        self._ends: dict[str, float] = {}

    def _enqueue(self, sub: Submission) -> None:
        self.queue.push(serialize_job(sub.desc), self.clock.now, sub)
        self._request_pass()

    def _request_pass(self) -> None:
        if not self._pass_pending and self.lifecycle is Lifecycle.READY:
            self._pass_pending = True
            self.clock.schedule_at(self.clock.now, self._pass)

    def _pass(self) -> None:
        self._pass_pending = False
        if self.lifecycle is not Lifecycle.READY:
            return
        now = self.clock.now
        running = [(end, self.submissions[sid].assignment) for sid, end in self._ends.items()]
        placed, never = schedule_step(self.queue, self.slotmap, now, running)
        for job, sub, a in placed:
            sub.assignment = a
            at = max(now, self._launcher_free_at) + self.params.launch_latency_s
            self._launcher_free_at = at
            run = sub.desc.run_time
            self._ends[sub.id] = at + (run if run > 0 else NULL_EPSILON)
            self._run(sub, at)
        for job, sub in never:
            self._finish(sub, EventKind.TASK_FAILED, f"sub={sub.id} NeverFits", now)

    def _abort(self, sub: Submission) -> None:
        if sub.state is SubState.QUEUED:
            self.queue.remove_ref(sub)
        self._ends.pop(sub.id, None)

    def _complete(self, sub: Submission) -> None:
        self._ends.pop(sub.id, None)
        super()._complete(sub)

    def _slots_freed(self, now: float) -> None:
        self._request_pass()

