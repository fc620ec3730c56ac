"""Tasks, their lifecycle state machine, and the append-only event record."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

EVENTS_HEADER = "#pilotrt-events v1"
ABSENT = "-"


class Modality(str, Enum):
    EXECUTABLE = "EXECUTABLE"
    FUNCTION = "FUNCTION"


class TaskState(str, Enum):
    NEW = "NEW"
    SCHEDULED = "SCHEDULED"
    SUBMITTED = "SUBMITTED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


class InstanceState(str, Enum):
    """Backend instance lifecycle records that share the task event log."""

    BOOTING = "INSTANCE_BOOTING"
    READY = "INSTANCE_READY"
    FAILED = "INSTANCE_FAILED"
    STOPPED = "INSTANCE_STOPPED"


TERMINAL_STATES = frozenset({TaskState.DONE, TaskState.FAILED, TaskState.CANCELED})

_FORWARD = {
    TaskState.NEW: TaskState.SCHEDULED,
    TaskState.SCHEDULED: TaskState.SUBMITTED,
    TaskState.SUBMITTED: TaskState.RUNNING,
}

LEGAL_TRANSITIONS: dict[TaskState, frozenset[TaskState]] = {
    TaskState.NEW: frozenset({TaskState.SCHEDULED, TaskState.CANCELED}),
    TaskState.SCHEDULED: frozenset({TaskState.SUBMITTED, TaskState.CANCELED}),
    TaskState.SUBMITTED: frozenset({TaskState.RUNNING, TaskState.CANCELED}),
    TaskState.RUNNING: frozenset({TaskState.DONE, TaskState.FAILED, TaskState.CANCELED}),
    TaskState.DONE: frozenset(),
    TaskState.FAILED: frozenset(),
    TaskState.CANCELED: frozenset(),
}

# Admission and backend failures may fail a task before it ever runs.
_FAIL_EARLY = frozenset({TaskState.NEW, TaskState.SCHEDULED, TaskState.SUBMITTED})


def is_legal(src: TaskState | None, dst: TaskState) -> bool:
    if src is None:
        return dst is TaskState.NEW
    if dst is TaskState.FAILED and src in _FAIL_EARLY:
        return True
    return dst in LEGAL_TRANSITIONS[src]


# Registered function kinds a worker can execute in-process, with their arity.
FUNCTION_KINDS: dict[str, tuple[int, int]] = {
    "noop": (0, 0),
    "sleep": (1, 1),
    "fail": (0, 1),
}


class ValidationError(ValueError):
    def __init__(self, reason: str, message: str = ""):
        super().__init__(f"{reason}: {message}" if message else reason)
        self.reason = reason


class IllegalTransition(RuntimeError):
    pass


class TimestampRegression(IllegalTransition):
    pass


@dataclass(frozen=True)
class TaskDescription:
    """What to run and what it needs.

    ``duration`` is ``None`` for a null task (returns immediately) or the
    sleep length in seconds. ``payload`` is a command line for executables
    and ``name:arg,arg`` for functions; both default to a form derived from
    ``duration``. ``locality`` pins a multi-node task to exactly that many
    nodes.
    """

    uid: str
    modality: Modality = Modality.EXECUTABLE
    cores: int = 1
    gpus: int = 0
    duration: float | None = None
    payload: str = ""
    locality: int | None = None
    stage: str | None = None

    @property
    def is_null(self) -> bool:
        return self.duration is None

    @property
    def run_time(self) -> float:
        return 0.0 if self.duration is None else float(self.duration)


def parse_function_payload(payload: str) -> tuple[str, list[str]]:
    name, _, rest = payload.partition(":")
    args = [a for a in rest.split(",")] if rest else []
    return name.strip(), args


def function_call(desc: TaskDescription) -> tuple[str, list[str]]:
    """Registered kind and arguments a worker runs for a function task."""
    if desc.payload:
        return parse_function_payload(desc.payload)
    if desc.duration is None or desc.duration == 0:
        return "noop", []
    return "sleep", [repr(float(desc.duration))]


def command_line(desc: TaskDescription) -> list[str]:
    """argv for an executable task."""
    import shlex

    if desc.payload:
        return shlex.split(desc.payload)
    if desc.duration is None or desc.duration == 0:
        return ["true"]
    return ["sleep", repr(float(desc.duration))]


@dataclass
class Task:
    desc: TaskDescription
    state: TaskState = TaskState.NEW
    instance_id: str | None = None
    partition_id: int | None = None
    submission_id: str | None = None
    retries: int = 0
    origin: str | None = None
    last_ts: float = 0.0

    @property
    def uid(self) -> str:
        return self.desc.uid


@dataclass(frozen=True)
class TaskEvent:
    ts: float
    uid: str
    state: TaskState | InstanceState
    partition: int | None = None
    backend: str | None = None
    detail: str | None = None

    @property
    def is_task(self) -> bool:
        return isinstance(self.state, TaskState)


def _clean(text: str | None) -> str:
    if text is None or text == "":
        return ABSENT
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def format_event(ev: TaskEvent) -> str:
    part = ABSENT if ev.partition is None else str(ev.partition)
    return "\t".join(
        (repr(float(ev.ts)), ev.uid, ev.state.value, part, _clean(ev.backend), _clean(ev.detail))
    )


def parse_state(text: str) -> TaskState | InstanceState:
    if text.startswith("INSTANCE_"):
        return InstanceState(text)
    return TaskState(text)


def parse_event(line: str) -> TaskEvent:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 6:
        raise ValueError(f"expected 6 tab-separated fields, got {len(fields)}")
    ts, uid, state, part, backend, detail = fields
    return TaskEvent(
        ts=float(ts),
        uid=uid,
        state=parse_state(state),
        partition=None if part == ABSENT else int(part),
        backend=None if backend == ABSENT else backend,
        detail=None if detail == ABSENT else detail,
    )


def write_event_log(path: str | Path, events: Iterable[TaskEvent]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVENTS_HEADER + "\n")
        for ev in events:
            fh.write(format_event(ev) + "\n")
    return path


def read_event_log(path: str | Path) -> list[TaskEvent]:
    events = []
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != EVENTS_HEADER:
            raise ValueError(f"{path}: missing header {EVENTS_HEADER!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                events.append(parse_event(line))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return events


@dataclass(frozen=True)
class Violation:
    uid: str
    kind: str
    message: str

    def __str__(self) -> str:
        return f"{self.uid}: {self.kind}: {self.message}"


@dataclass
class LegalityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def legal(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        return "\n".join(str(v) for v in self.violations) or "log is legal"


def validate_event_log(events: Sequence[TaskEvent]) -> LegalityReport:
    """Sweep a log for state-machine and timestamp violations.

    Instance lifecycle records are ignored; every task must start at NEW,
    follow legal transitions with non-decreasing timestamps, carry placement
    on RUNNING, and end in a terminal state.
    """
    report = LegalityReport()
    last: dict[str, TaskEvent] = {}
    for ev in events:
        if not ev.is_task:
            continue
        prev = last.get(ev.uid)
        src = None if prev is None else prev.state
        if not is_legal(src, ev.state):
            what = "first event" if src is None else src.value
            report.violations.append(
                Violation(ev.uid, "IllegalTransition", f"{what} -> {ev.state.value} at {ev.ts!r}")
            )
        if prev is not None and ev.ts < prev.ts:
            report.violations.append(
                Violation(ev.uid, "TimestampRegression", f"{ev.ts!r} < {prev.ts!r}")
            )
        if ev.state is TaskState.RUNNING and (ev.partition is None or ev.backend is None):
            report.violations.append(
                Violation(ev.uid, "MissingPlacement", f"RUNNING at {ev.ts!r} lacks partition/backend")
            )
        last[ev.uid] = ev
    for uid, ev in last.items():
        if not ev.state.terminal:
            report.violations.append(
                Violation(uid, "MissingTerminal", f"last state {ev.state.value}")
            )
    return report


class Pilot:
    """Resource placeholder owning the task registry and the event log.

    Timestamps handed to :meth:`transition` are in run time units; the pilot
    multiplies them by ``time_scale`` before recording.
    """

    def __init__(self, uid: str = "pilot.0000", allocation=None, time_scale: float = 1.0):
        self.uid = uid
        self.allocation = allocation
        self.time_scale = time_scale
        self.backends: list = []
        self.registry: dict[str, Task] = {}
        self.events: list[TaskEvent] = []
        self._lock = threading.RLock()

    def validate_description(self, desc: TaskDescription, at: float = 0.0) -> Task:
        if desc.cores < 1:
            raise ValidationError("ZeroCores", f"{desc.uid} requests {desc.cores} cores")
        if desc.gpus < 0:
            raise ValidationError("NegativeGpus", f"{desc.uid} requests {desc.gpus} gpus")
        if desc.duration is not None and (desc.duration < 0 or math.isnan(desc.duration)):
            raise ValidationError("NegativeDuration", f"{desc.uid} duration {desc.duration}")
        if desc.locality is not None and desc.locality < 1:
            raise ValidationError("BadLocality", f"{desc.uid} locality {desc.locality}")
        if desc.modality is Modality.FUNCTION:
            name, args = function_call(desc)
            arity = FUNCTION_KINDS.get(name)
            if arity is None:
                raise ValidationError("UnknownFunctionName", f"{desc.uid} calls {name!r}")
            if not arity[0] <= len(args) <= arity[1]:
                raise ValidationError("UnknownFunctionName", f"{name} takes {arity} args")
        with self._lock:
            if desc.uid in self.registry:
                raise ValidationError("DuplicateUid", desc.uid)
            task = Task(desc=desc)
            self.registry[desc.uid] = task
            ts = at * self.time_scale
            task.last_ts = ts
            self.events.append(TaskEvent(ts, desc.uid, TaskState.NEW))
        return task

    def transition(
        self,
        task: Task,
        to: TaskState,
        at: float,
        partition: int | None = None,
        backend: str | None = None,
        detail: str | None = None,
    ) -> TaskEvent:
        ts = at * self.time_scale
        with self._lock:
            if self.registry.get(task.uid) is not task:
                raise KeyError(f"unknown task {task.uid}")
            if not is_legal(task.state, to):
                raise IllegalTransition(f"{task.uid}: {task.state.value} -> {to.value}")
            if ts < task.last_ts:
                raise TimestampRegression(f"{task.uid}: {ts!r} < {task.last_ts!r}")
            ev = TaskEvent(ts, task.uid, to, partition, backend, detail)
            self.events.append(ev)
            task.state = to
            task.last_ts = ts
        return ev

    def record_instance(
        self,
        instance_id: str,
        state: InstanceState,
        at: float,
        partition: int | None = None,
        backend: str | None = None,
        detail: str | None = None,
    ) -> TaskEvent:
        ev = TaskEvent(at * self.time_scale, instance_id, state, partition, backend, detail)
        with self._lock:
            self.events.append(ev)
        return ev

    def task_events(self) -> list[TaskEvent]:
        with self._lock:
            return [ev for ev in self.events if ev.is_task]

    def counts(self) -> dict[TaskState, int]:
        out = {s: 0 for s in TaskState}
        with self._lock:
            for task in self.registry.values():
                out[task.state] += 1
        return out

    def registry_coherent(self) -> bool:
        last: dict[str, TaskState] = {}
        with self._lock:
            for ev in self.events:
                if ev.is_task:
                    last[ev.uid] = ev.state
            return all(last.get(uid) is t.state for uid, t in self.registry.items())

    def quiescent(self) -> bool:
        with self._lock:
            return all(t.state.terminal for t in self.registry.values())
