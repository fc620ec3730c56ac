"""Persistent workers fed over a message channel; no per-task scheduling."""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import Enum

from ..core import Modality, function_call
from .base import BackendEvent, BackendFamily, EventKind, SimBackend, SubState, Submission


class DispatchRule(str, Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_BUSY = "least_busy"


class Outcome(str, Enum):
    OK = "OK"
    ERROR = "ERROR"


@dataclass
class Worker:
    id: int
    node_id: int
    busy: bool = False
    tasks_run: int = 0


@dataclass(frozen=True)
class CompletionRecord:
    task_uid: str
    worker_id: int
    started: float
    ended: float
    outcome: Outcome = Outcome.OK
    detail: str = ""
    submission_id: str | None = None


class WorkerPool:
    """Worker table with an idle set ordered by the dispatch rule."""

    def __init__(self, node_ids, workers_per_node: int, rule: DispatchRule = DispatchRule.ROUND_ROBIN):
        if workers_per_node < 1:
            raise ValueError("workers_per_node must be positive")
        self.rule = DispatchRule(rule)
        self.workers = [Worker(i, n) for i, n in enumerate(
            n for n in node_ids for _ in range(workers_per_node))]
        self._rr: deque[int] = deque(w.id for w in self.workers)
        self._heap: list[tuple[int, int]] = [(0, w.id) for w in self.workers]

    def __len__(self) -> int:
        return len(self.workers)

    @property
    def idle_count(self) -> int:
        return sum(1 for w in self.workers if not w.busy)

    def idle_order(self):
        if self.rule is DispatchRule.ROUND_ROBIN:
            return iter(self._rr)
        return (wid for _, wid in sorted(self._heap))

    def take(self, wid: int) -> Worker:
        w = self.workers[wid]
        if w.busy:
            raise RuntimeError(f"worker {wid} already busy")
        if self.rule is DispatchRule.ROUND_ROBIN:
            self._rr.remove(wid) if self._rr[0] != wid else self._rr.popleft()
        else:
            self._heap.remove((w.tasks_run, wid))
            heapq.heapify(self._heap)
        w.busy = True
        w.tasks_run += 1
        return w

    def release(self, wid: int) -> None:
        w = self.workers[wid]
        if not w.busy:
            raise RuntimeError(f"worker {wid} is not busy")
        w.busy = False
        if self.rule is DispatchRule.ROUND_ROBIN:
            self._rr.append(wid)
        else:
            heapq.heappush(self._heap, (w.tasks_run, wid))


class WorkerPoolBackend(SimBackend):
    family = BackendFamily.WORKERPOOL

    def __init__(self, instance_id, partition, params=None, clock=None, workers_per_node: int | None = None,
                 rule: DispatchRule | str = DispatchRule.ROUND_ROBIN, spawn_latency_s: float = 0.03, **kw):
        super().__init__(instance_id, partition, params, clock, **kw)
        self.workers_per_node = workers_per_node or partition.slotmap.spec.cores
        self.rule = DispatchRule(rule)
        self.spawn_latency_s = spawn_latency_s
        self.pool: WorkerPool | None = None
        self.pending: deque[Submission] = deque()
        self.completions: deque[CompletionRecord] = deque()
        self._channel_free_at = 0.0

    @property
    def channel_latency(self) -> float:
        return self.params.launch_latency_s

    def _on_ready(self) -> None:
        self.pool = WorkerPool(self.partition.node_ids, self.workers_per_node, self.rule)

    def _enqueue(self, sub: Submission) -> None:
        self.pending.append(sub)
        self._dispatch()

    def _dispatch(self) -> None:
        now = self.clock.now
        while self.pending:
            sub = self.pending[0]
            d = sub.desc
            chosen = None
            for wid in self.pool.idle_order():
                a = self.slotmap.acquire_on(sub.id, self.pool.workers[wid].node_id, d.cores, d.gpus)
                if a is not None:
                    chosen = wid
                    sub.assignment = a
                    break
            if chosen is None:
                return
            self.pending.popleft()
            self.pool.take(chosen)
            sub.worker = chosen
            at = max(now, self._channel_free_at) + self.channel_latency
            self._channel_free_at = at
            if d.modality is Modality.EXECUTABLE:
                at += self.spawn_latency_s
            self._run(sub, at)

    def _end(self, sub: Submission) -> None:
        if sub.state is not SubState.RUNNING:
            return
        outcome, detail = Outcome.OK, ""
        if sub.desc.modality is Modality.FUNCTION:
            name, args = function_call(sub.desc)
            if name == "fail":
                outcome, detail = Outcome.ERROR, args[0] if args else "fail"
        self.completions.append(CompletionRecord(sub.uid, sub.worker, sub.started, self.clock.now,
                                                 outcome, detail, sub.id))
        self.watch()

    def watch(self) -> list[BackendEvent]:
        """Turn pending completion records into terminal events and free workers."""
        n0 = len(self._outbox)
        while self.completions:
            rec = self.completions.popleft()
            sub = self.submissions.get(rec.submission_id) if rec.submission_id else None
            if sub is None:
                sub = next((s for s in self.submissions.values()
                            if s.uid == rec.task_uid and s.state is not SubState.TERMINAL), None)
            if sub is None or sub.state is SubState.TERMINAL:
                continue
            if rec.ended < rec.started or not isinstance(rec.outcome, Outcome):
                kind, detail = EventKind.TASK_FAILED, f"sub={sub.id} MalformedCompletion"
            elif rec.outcome is Outcome.OK:
                kind, detail = EventKind.TASK_DONE, f"sub={sub.id} worker={rec.worker_id}"
            else:
                kind, detail = EventKind.TASK_FAILED, f"sub={sub.id} ERR {rec.detail}"
            self._free_worker(sub)
            self._finish(sub, kind, detail, self.clock.now)
        return list(self._outbox)[n0:]

    def _free_worker(self, sub: Submission) -> None:
        if sub.worker is not None and self.pool is not None and self.pool.workers[sub.worker].busy:
            self.pool.release(sub.worker)

    def _abort(self, sub: Submission) -> None:
        if sub.state is SubState.QUEUED:
            try:
                self.pending.remove(sub)
            except ValueError:
                pass
        elif sub.state in (SubState.LAUNCHING, SubState.RUNNING):
            self._free_worker(sub)

    def _slots_freed(self, now: float) -> None:
        if self.pool is not None:
            self._dispatch()

