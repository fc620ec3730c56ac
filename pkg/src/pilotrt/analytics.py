"""Throughput, utilization, overhead, makespan and concurrency from an event log."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .core import InstanceState, TaskEvent, TaskState
from .resources import Allocation


class EmptyLog(ValueError):
    pass


class ZeroWindow(ValueError):
    pass


class MissingReadyEvent(ValueError):
    pass


class NonQuiescentLog(ValueError):
    pass


_FIELD = re.compile(r"\b(cores|gpus)=(\d+)")


def _detail_counts(detail: str | None) -> dict[str, int]:
    return {k: int(v) for k, v in _FIELD.findall(detail or "")}


@dataclass(frozen=True)
class Interval:
    uid: str
    start: float
    end: float
    cores: int
    gpus: int


def intervals(events: Sequence[TaskEvent], default_cores: int | None = None) -> list[Interval]:
    """Running intervals, one per task that reached RUNNING and then a terminal state."""
    open_: dict[str, TaskEvent] = {}
    out = []
    for ev in events:
        if not ev.is_task:
            continue
        if ev.state is TaskState.RUNNING:
            open_[ev.uid] = ev
        elif ev.state.terminal and ev.uid in open_:
            run = open_.pop(ev.uid)
            counts = _detail_counts(run.detail)
            if "cores" not in counts and default_cores is None:
                raise ValueError(f"{ev.uid}: RUNNING event lacks cores=")
            out.append(Interval(ev.uid, run.ts, ev.ts, counts.get("cores", default_cores or 0),
                                counts.get("gpus", 0)))
    return out


def _starts(events) -> np.ndarray:
    return np.array([ev.ts for ev in events if ev.is_task and ev.state is TaskState.RUNNING], dtype=np.float64)


def _terminals(events) -> np.ndarray:
    return np.array([ev.ts for ev in events if ev.is_task and ev.state.terminal], dtype=np.float64)


@dataclass(frozen=True)
class Throughput:
    avg: float
    peak: float
    series: list[tuple[float, int]]


def throughput(events: Sequence[TaskEvent], bucket_s: float = 1.0, window: str = "launch") -> Throughput:
    """Task starts per second.

    ``window="launch"`` averages over first to last start; ``"makespan"``
    divides by [0, last terminal]. A zero-length window counts as one bucket.
    """
    if bucket_s <= 0:
        raise ValueError("bucket_s must be positive")
    starts = _starts(events)
    if starts.size == 0:
        raise EmptyLog("no RUNNING events")
    n = starts.size
    if window == "makespan":
        span = float(_terminals(events).max())
    elif window == "launch":
        span = float(starts.max() - starts.min())
    else:
        raise ValueError(f"unknown window {window!r}")
    avg = n / span if span > 0 else n / bucket_s
    nb = int(math.floor(starts.max() / bucket_s)) + 1
    counts = _kernels.bucket_counts(starts, 0.0, bucket_s, nb)
    series = [(i * bucket_s, int(c)) for i, c in enumerate(counts) if c]
    peak = float(counts.max()) / bucket_s
    return Throughput(avg, peak, series)


@dataclass(frozen=True)
class Utilization:
    pct: float
    busy: float
    capacity: float
    window: tuple[float, float]
    gpu_pct: float | None = None


def utilization(events: Sequence[TaskEvent], allocation: Allocation, window: str | tuple[float, float] = "net",
                default_cores: int | None = None) -> Utilization:
    """Busy core-seconds over capacity core-seconds.

    ``"net"`` spans first RUNNING to last terminal; ``"gross"`` starts at 0.
    """
    ivs = intervals(events, default_cores)
    if not ivs:
        raise EmptyLog("no completed RUNNING intervals")
    start = np.array([i.start for i in ivs])
    end = np.array([i.end for i in ivs])
    if isinstance(window, tuple):
        lo, hi = window
    elif window == "net":
        lo, hi = float(start.min()), float(_terminals(events).max())
    elif window == "gross":
        lo, hi = 0.0, float(_terminals(events).max())
    else:
        raise ValueError(f"unknown window {window!r}")
    if hi <= lo:
        raise ZeroWindow(f"window [{lo}, {hi}]")
    cores = np.array([i.cores for i in ivs], dtype=np.float64)
    busy = _kernels.busy_area(start, end, cores, lo, hi)
    capacity = allocation.total_cores * (hi - lo)
    gpu_pct = None
    gpus = np.array([i.gpus for i in ivs], dtype=np.float64)
    if gpus.any() and allocation.total_gpus:
        gpu_pct = 100.0 * _kernels.busy_area(start, end, gpus, lo, hi) / (allocation.total_gpus * (hi - lo))
    return Utilization(100.0 * busy / capacity, busy, capacity, (lo, hi), gpu_pct)


@dataclass(frozen=True)
class Overhead:
    per_instance: dict[str, float]
    aggregate: float
    failed: dict[str, str]


def overhead(events: Sequence[TaskEvent]) -> Overhead:
    """Bootstrap time per instance; the aggregate is the wall time covered by any bootstrap."""
    started: dict[str, float] = {}
    ready: dict[str, float] = {}
    failed: dict[str, str] = {}
    for ev in events:
        if ev.state is InstanceState.BOOTING:
            started[ev.uid] = ev.ts
        elif ev.state is InstanceState.READY:
            ready[ev.uid] = ev.ts
        elif ev.state is InstanceState.FAILED and ev.uid not in ready:
            failed[ev.uid] = ev.detail or "failed"
    missing = [i for i in started if i not in ready and i not in failed]
    if missing:
        raise MissingReadyEvent(", ".join(sorted(missing)))
    per = {i: ready[i] - started[i] for i in started if i in ready}
    spans = sorted((started[i], ready[i]) for i in per)
    total, cur_lo, cur_hi = 0.0, None, None
    for lo, hi in spans:
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return Overhead(per, total, failed)


def makespan(events: Sequence[TaskEvent]) -> float:
    last: dict[str, TaskEvent] = {}
    for ev in events:
        if ev.is_task:
            last[ev.uid] = ev
    if not last:
        raise EmptyLog("no task events")
    open_ = [u for u, ev in last.items() if not ev.state.terminal]
    if open_:
        raise NonQuiescentLog(f"{len(open_)} tasks without a terminal event, e.g. {open_[0]}")
    return max(ev.ts for ev in last.values())


def concurrency_series(events: Sequence[TaskEvent]) -> list[tuple[float, int]]:
    """Running-task count after every change point."""
    running = set()
    times, deltas = [], []
    for ev in events:
        if not ev.is_task:
            continue
        if ev.state is TaskState.RUNNING:
            running.add(ev.uid)
            times.append(ev.ts)
            deltas.append(1)
        elif ev.state.terminal and ev.uid in running:
            running.discard(ev.uid)
            times.append(ev.ts)
            deltas.append(-1)
    if not times:
        return []
    t, d = _kernels.sort_changes(np.array(times, dtype=np.float64), np.array(deltas, dtype=np.int64))
    ts, run = _kernels.step_series(t, d)
    return [(float(a), int(b)) for a, b in zip(ts, run)]


def max_concurrency(events: Sequence[TaskEvent]) -> int:
    s = concurrency_series(events)
    return max((r for _, r in s), default=0)


@dataclass
class MetricsReport:
    avg_throughput: float
    peak_throughput: float
    throughput_series: list[tuple[float, int]]
    utilization_pct: float
    gross_utilization_pct: float
    busy_core_seconds: float
    capacity_core_seconds: float
    makespan_s: float
    per_instance_overhead_s: dict[str, float]
    aggregate_overhead_s: float
    concurrency_series: list[tuple[float, int]]
    max_concurrency: int
    tasks_done: int = 0
    tasks_failed: int = 0
    tasks_canceled: int = 0
    gpu_utilization_pct: float | None = None
    failed_instances: dict[str, str] = field(default_factory=dict)

    SCALARS = ("avg_throughput", "peak_throughput", "utilization_pct", "gross_utilization_pct",
               "gpu_utilization_pct", "busy_core_seconds", "capacity_core_seconds", "makespan_s",
               "aggregate_overhead_s", "max_concurrency", "tasks_done", "tasks_failed", "tasks_canceled")

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for k in self.SCALARS:
            v = getattr(self, k)
            out.append((k, "" if v is None else repr(v)))
        for iid, v in sorted(self.per_instance_overhead_s.items()):
            out.append((f"overhead.{iid}", repr(v)))
        return out

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out_dir / "metrics.csv",
            "throughput": out_dir / "throughput.csv",
            "concurrency": out_dir / "concurrency.csv",
        }
        _write_csv(paths["metrics"], ("metric", "value"), self.rows())
        _write_csv(paths["throughput"], ("bucket_start", "count"),
                   [(repr(float(t)), c) for t, c in self.throughput_series])
        _write_csv(paths["concurrency"], ("t", "running"),
                   [(repr(float(t)), r) for t, r in self.concurrency_series])
        return paths


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report(events: Sequence[TaskEvent], allocation: Allocation, bucket_s: float = 1.0,
           throughput_window: str = "launch") -> MetricsReport:
    tp = throughput(events, bucket_s, throughput_window)
    net = utilization(events, allocation, "net")
    gross = utilization(events, allocation, "gross")
    ov = overhead(events)
    conc = concurrency_series(events)
    last: dict[str, TaskState] = {}
    for ev in events:
        if ev.is_task:
            last[ev.uid] = ev.state
    counts = {s: 0 for s in TaskState}
    for s in last.values():
        counts[s] += 1
    return MetricsReport(
        avg_throughput=tp.avg,
        peak_throughput=tp.peak,
        throughput_series=tp.series,
        utilization_pct=net.pct,
        gross_utilization_pct=gross.pct,
        busy_core_seconds=net.busy,
        capacity_core_seconds=net.capacity,
        makespan_s=makespan(events),
        per_instance_overhead_s=ov.per_instance,
        aggregate_overhead_s=ov.aggregate,
        concurrency_series=conc,
        max_concurrency=max((r for _, r in conc), default=0),
        tasks_done=counts[TaskState.DONE],
        tasks_failed=counts[TaskState.FAILED],
        tasks_canceled=counts[TaskState.CANCELED],
        gpu_utilization_pct=net.gpu_pct,
        failed_instances=ov.failed,
    )
