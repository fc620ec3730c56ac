"""Wall-clock backends that run real local processes."""

from __future__ import annotations

import logging
import os
import selectors
import signal
import subprocess
import sys
import threading
import time
from collections import deque
from typing import Iterator

from ..core import Modality, command_line, function_call
from .. import worker as wire
from .base import BackendFamily, BackendInstance, EventKind, Lifecycle, SubState, Submission, running_detail
from .capped import DEFAULT_CAP, CapState
from .hierarchical import InstanceQueue, QueuePolicy, schedule_step, serialize_job

log = logging.getLogger(__name__)

POLL_S = 0.002


class RealBackend(BackendInstance):
    def __init__(self, instance_id, partition, params=None, time_fn=None, **_):
        super().__init__(instance_id, partition, params)
        self._epoch = time.monotonic()
        self._time_fn = time_fn or (lambda: time.monotonic() - self._epoch)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def now(self) -> float:
        return self._time_fn()

    def _mark_ready(self) -> None:
        with self._lock:
            if self.lifecycle is not Lifecycle.BOOTING:
                return
            self.lifecycle = Lifecycle.READY
            self.bootstrap_ready = self.now()
            self.emit(EventKind.READY, self.bootstrap_ready)

    def _boot_failed(self, cause: str) -> None:
        with self._lock:
            if self.lifecycle is not Lifecycle.BOOTING:
                return
            self.lifecycle = Lifecycle.FAILED
            self.failure = cause
            self.emit(EventKind.INSTANCE_FAILED, self.now(), detail=cause)

    def _start_thread(self, target, name) -> None:
        t = threading.Thread(target=target, name=f"{self.id}-{name}", daemon=True)
        self._threads.append(t)
        t.start()

    def shutdown(self) -> None:
        self.stop()
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)


class RealExecBackend(RealBackend):
    """Spawns one child process per task; a scheduler thread places and reaps them."""

    def __init__(self, instance_id, partition, params=None, time_fn=None, family=BackendFamily.HIERARCHICAL,
                 cap: int = DEFAULT_CAP, policy=QueuePolicy.FCFS_BACKFILL, **kw):
        self.family = BackendFamily(family)
        super().__init__(instance_id, partition, params, time_fn)
        self.cap_state = CapState(cap=cap, launch_latency=0.0) if self.family is BackendFamily.CAPPED else None
        self.queue = InstanceQueue(QueuePolicy(policy))
        self._procs: dict[str, subprocess.Popen] = {}
        self._ends: dict[str, float] = {}
        self._wake = threading.Condition(self._lock)

    def bootstrap(self, now=None) -> None:
        self.bootstrap_started = self.now() if now is None else now
        self._start_thread(self._loop, "sched")
        self._mark_ready()

    def _enqueue(self, sub: Submission) -> None:
        self.queue.push(serialize_job(sub.desc), self.now(), sub)
        self._wake.notify()

    def _place_capped(self, sub: Submission) -> bool:
        d = sub.desc
        a = self.slotmap.acquire(sub.id, d.cores, d.gpus, d.locality)
        if a is None:
            return False
        sub.assignment = a
        return True

    def _schedule(self) -> Iterator[Submission]:
        now = self.now()
        if self.cap_state is not None:
            cs = self.cap_state
            while len(self.queue) and cs.in_flight < cs.cap and self._place_capped(self.queue.head()[2]):
                cs.in_flight += 1
                yield self.queue.popleft()[2]
            return
        running = [(end, self.submissions[sid].assignment) for sid, end in self._ends.items()]
        placed, never = schedule_step(self.queue, self.slotmap, now, running)
        for job, sub in never:
            self._finish(sub, EventKind.TASK_FAILED, f"sub={sub.id} NeverFits", now)
        for job, sub, a in placed:
            sub.assignment = a
            self._ends[sub.id] = now + sub.desc.run_time
            yield sub

    def _spawn(self, sub: Submission) -> None:
        now = self.now()
        try:
            proc = subprocess.Popen(command_line(sub.desc), stdin=subprocess.DEVNULL,
                                    stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        except OSError as exc:
            self._release_cap(sub)
            self._finish(sub, EventKind.TASK_FAILED, f"sub={sub.id} SpawnError: {exc}", now)
            return
        self._procs[sub.id] = proc
        sub.state = SubState.RUNNING
        sub.started = now
        self.emit(EventKind.TASK_RUNNING, now, sub.uid, running_detail(sub) + f" pid={proc.pid}", sub)

    def _release_cap(self, sub: Submission) -> None:
        if self.cap_state is not None and self.cap_state.in_flight > 0:
            self.cap_state.in_flight -= 1

    def _reap(self) -> bool:
        done = [(sid, p) for sid, p in self._procs.items() if p.poll() is not None]
        for sid, proc in done:
            del self._procs[sid]
            self._ends.pop(sid, None)
            sub = self.submissions[sid]
            if sub.state is SubState.TERMINAL:
                continue
            self._release_cap(sub)
            rc = proc.returncode
            kind = EventKind.TASK_DONE if rc == 0 else EventKind.TASK_FAILED
            self._finish(sub, kind, f"sub={sid} rc={rc}", self.now())
        return bool(done)

    def _loop(self) -> None:
        while not self._stop.is_set():
            with self._lock:
                if self.lifecycle is Lifecycle.READY:
                    self._reap()
                    for sub in list(self._schedule()):
                        self._spawn(sub)
                idle = not self._procs and not len(self.queue)
                if idle:
                    self._wake.wait(0.05)
            if not idle:
                time.sleep(POLL_S)

    def _abort(self, sub: Submission) -> None:
        if sub.state is SubState.QUEUED:
            self.queue.remove_ref(sub)
            return
        proc = self._procs.pop(sub.id, None)
        self._ends.pop(sub.id, None)
        if proc is not None and proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                proc.kill()
        self._release_cap(sub)

    def _cancel(self, sub: Submission) -> None:
        self._abort(sub)
        self._finish(sub, EventKind.TASK_CANCELED, f"sub={sub.id} canceled", self.now())
        self._wake.notify()

    def fail(self, cause: str) -> None:
        super().fail(cause)
        self._stop.set()


class _WorkerProc:
    def __init__(self, wid: int, node_id: int):
        self.id = wid
        self.node_id = node_id
        self.proc: subprocess.Popen | None = None
        self.pid: int | None = None
        self.sub: Submission | None = None
        self.respawns = 0
        self.hello = False
        self.buf = b""


def _worker_env() -> dict:
    env = dict(os.environ)
    src = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


class RealPoolBackend(RealBackend):
    """Persistent ``python -m pilotrt.worker`` processes behind length-prefixed pipes."""

    family = BackendFamily.WORKERPOOL

    def __init__(self, instance_id, partition, params=None, time_fn=None, workers_per_node: int | None = None,
                 max_respawns: int = 1, **kw):
        super().__init__(instance_id, partition, params, time_fn)
        self.workers_per_node = workers_per_node or partition.slotmap.spec.cores
        self.max_respawns = max_respawns
        self.workers: list[_WorkerProc] = []
        self.idle: deque[int] = deque()
        self.pending: deque[Submission] = deque()
        self._sel = selectors.DefaultSelector()

    @property
    def worker_pids(self) -> set[int]:
        return {w.pid for w in self.workers if w.pid is not None}

    def _spawn_worker(self, w: _WorkerProc) -> None:
        w.proc = subprocess.Popen([sys.executable, "-m", "pilotrt.worker"], stdin=subprocess.PIPE,
                                  stdout=subprocess.PIPE, env=_worker_env())
        w.pid = w.proc.pid
        w.hello = False
        w.buf = b""
        os.set_blocking(w.proc.stdout.fileno(), False)
        self._sel.register(w.proc.stdout, selectors.EVENT_READ, w)

    def bootstrap(self, now=None) -> None:
        self.bootstrap_started = self.now() if now is None else now
        wid = 0
        for node in self.partition.node_ids:
            for _ in range(self.workers_per_node):
                self.workers.append(_WorkerProc(wid, node))
                wid += 1
        try:
            for w in self.workers:
                self._spawn_worker(w)
        except OSError as exc:
            self._boot_failed(f"SpawnError: {exc}")
            return
        self._start_thread(self._watch, "watch")

    def _frames(self, w: _WorkerProc):
        try:
            chunk = os.read(w.proc.stdout.fileno(), 65536)
        except BlockingIOError:
            return [], False
        if not chunk:
            return [], True
        w.buf += chunk
        out = []
        while len(w.buf) >= 4:
            n = int.from_bytes(w.buf[:4], "big")
            if len(w.buf) < 4 + n:
                break
            out.append(w.buf[4:4 + n].decode("utf-8"))
            w.buf = w.buf[4 + n:]
        return out, False

    def _watch(self) -> None:
        deadline = time.monotonic() + self.params.startup_timeout_s
        while not self._stop.is_set():
            if self.lifecycle is Lifecycle.BOOTING and time.monotonic() > deadline:
                self._boot_failed("BootstrapTimeout")
                self._kill_all()
                return
            for key, _ in self._sel.select(timeout=0.05):
                w = key.data
                frames, eof = self._frames(w)
                with self._lock:
                    for text in frames:
                        self._on_frame(w, text)
                    if eof:
                        self._on_worker_death(w)

    def _on_frame(self, w: _WorkerProc, text: str) -> None:
        try:
            uid, status, detail = wire.decode_response(text)
        except ValueError:
            uid, status, detail = "?", "ERR", f"malformed response {text!r}"
        if uid == "-":
            if not w.hello and status == "OK":
                w.hello = True
                self.idle.append(w.id)
                if self.lifecycle is Lifecycle.BOOTING and all(x.hello for x in self.workers):
                    self._mark_ready()
                self._dispatch()
            return
        sub = w.sub
        if sub is None or sub.state is SubState.TERMINAL:
            return
        w.sub = None
        self.idle.append(w.id)
        if sub.uid != uid:
            kind, det = EventKind.TASK_FAILED, f"sub={sub.id} MalformedCompletion {detail}"
        elif status == "OK":
            kind, det = EventKind.TASK_DONE, f"sub={sub.id} worker={w.id} {detail}"
        else:
            kind, det = EventKind.TASK_FAILED, f"sub={sub.id} worker={w.id} ERR {detail}"
        self._finish(sub, kind, det, self.now())

    def _on_worker_death(self, w: _WorkerProc) -> None:
        try:
            self._sel.unregister(w.proc.stdout)
        except (KeyError, ValueError):
            pass
        if w.id in self.idle:
            self.idle.remove(w.id)
        sub, w.sub = w.sub, None
        if sub is not None and sub.state is not SubState.TERMINAL:
            self._finish(sub, EventKind.TASK_FAILED, f"sub={sub.id} WorkerDied pid={w.pid}", self.now())
        if self._stop.is_set() or self.lifecycle is not Lifecycle.READY:
            return
        if w.respawns < self.max_respawns:
            w.respawns += 1
            try:
                self._spawn_worker(w)
            except OSError as exc:
                log.error("respawn of worker %d failed: %s", w.id, exc)

    def _enqueue(self, sub: Submission) -> None:
        self.pending.append(sub)
        self._dispatch()

    def _request(self, sub: Submission) -> str:
        if sub.desc.modality is Modality.FUNCTION:
            kind, args = function_call(sub.desc)
        else:
            kind, args = "exec", command_line(sub.desc)
        return wire.encode_request(sub.uid, kind, args)

    def _dispatch(self) -> None:
        while self.pending and self.idle and self.lifecycle is Lifecycle.READY:
            sub = self.pending[0]
            d = sub.desc
            chosen = None
            for wid in self.idle:
                a = self.slotmap.acquire_on(sub.id, self.workers[wid].node_id, d.cores, d.gpus)
                if a is not None:
                    sub.assignment, chosen = a, wid
                    break
            if chosen is None:
                return
            self.pending.popleft()
            self.idle.remove(chosen)
            w = self.workers[chosen]
            w.sub = sub
            sub.worker = chosen
            sub.state = SubState.RUNNING
            sub.started = self.now()
            try:
                wire.write_frame(w.proc.stdin, self._request(sub))
            except (BrokenPipeError, OSError):
                self._on_worker_death(w)
                continue
            self.emit(EventKind.TASK_RUNNING, sub.started, sub.uid,
                      running_detail(sub) + f" pid={w.pid}", sub)

    def _slots_freed(self, now: float) -> None:
        self._dispatch()

    def _abort(self, sub: Submission) -> None:
        if sub.state is SubState.QUEUED:
            try:
                self.pending.remove(sub)
            except ValueError:
                pass
            return
        w = self.workers[sub.worker] if sub.worker is not None else None
        if w is not None and w.sub is sub:
            # The worker cannot be interrupted mid-task; replace it.
            w.sub = None
            if w.proc and w.proc.poll() is None:
                w.proc.send_signal(signal.SIGKILL)

    def _cancel(self, sub: Submission) -> None:
        self._abort(sub)
        self._finish(sub, EventKind.TASK_CANCELED, f"sub={sub.id} canceled", self.now())

    def _kill_all(self) -> None:
        for w in self.workers:
            if w.proc and w.proc.poll() is None:
                try:
                    w.proc.stdin.close()
                except OSError:
                    pass
                w.proc.kill()

    def fail(self, cause: str) -> None:
        super().fail(cause)
        self._stop.set()
        self._kill_all()

    def shutdown(self) -> None:
        self._stop.set()
        for w in self.workers:
            if w.proc and w.proc.poll() is None:
                try:
                    w.proc.stdin.close()
                except OSError:
                    pass
        for w in self.workers:
            if w.proc:
                try:
                    w.proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    w.proc.kill()
        super().shutdown()
        self._sel.close()


REAL_CLASSES = {
    BackendFamily.CAPPED: lambda *a, **k: RealExecBackend(*a, family=BackendFamily.CAPPED, **k),
    BackendFamily.HIERARCHICAL: lambda *a, **k: RealExecBackend(*a, family=BackendFamily.HIERARCHICAL, **k),
    BackendFamily.WORKERPOOL: RealPoolBackend,
}
