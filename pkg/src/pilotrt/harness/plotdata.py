"""CSV data for external plotting, one file per figure analog.

| id | columns |
|----|---------|
| 3 | t, running, cap |
| 4 | bucket_start, starts, rate |
| 5 | instance, family, starts, avg_throughput |
| 6 | t, busy_cores, utilization_pct |
| 7 | instance, family, overhead_s |
| 8 | t, running, start_rate |
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from ..backends.base import BackendFamily
from ..core import TaskState

FIGURES = (3, 4, 5, 6, 7, 8)


class UnknownFigureId(ValueError):
    pass


def _write(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def _cap_of(b) -> int:
    state = getattr(b, "state", None) or getattr(b, "cap_state", None)
    return state.cap


def fig_rows(result, fig: int):
    rep = result.report
    events = result.pilot.events
    bucket = result.config.get("experiment", "bucket_s")
    if fig == 3:
        caps = [_cap_of(b) for b in result.instances if b.family is BackendFamily.CAPPED]
        cap = "" if not caps else str(sum(caps))
        return ("t", "running", "cap"), [(_fmt(t), r, cap) for t, r in rep.concurrency_series]
    if fig == 4:
        return ("bucket_start", "starts", "rate"), [
            (_fmt(t), c, _fmt(c / bucket)) for t, c in rep.throughput_series]
    if fig == 5:
        starts: dict[str, list[float]] = {}
        for ev in events:
            if ev.is_task and ev.state is TaskState.RUNNING:
                starts.setdefault(ev.backend, []).append(ev.ts)
        rows = []
        for b in result.instances:
            ts = starts.get(b.id, [])
            span = (max(ts) - min(ts)) if ts else 0.0
            avg = len(ts) / span if span > 0 else (len(ts) / bucket if ts else 0.0)
            rows.append((b.id, b.family.value, len(ts), _fmt(avg)))
        return ("instance", "family", "starts", "avg_throughput"), rows
    if fig == 6:
        return ("t", "busy_cores", "utilization_pct"), _busy_cores(events, result.allocation.total_cores)
    if fig == 7:
        fam = {b.id: b.family.value for b in result.instances}
        return ("instance", "family", "overhead_s"), [
            (iid, fam.get(iid, ""), _fmt(v)) for iid, v in sorted(rep.per_instance_overhead_s.items())]
    if fig == 8:
        conc = rep.concurrency_series
        if not conc:
            return ("t", "running", "start_rate"), []
        rate = dict(rep.throughput_series)
        rows = []
        for t, r in conc:
            b = np.floor(t / bucket) * bucket
            rows.append((_fmt(t), r, _fmt(rate.get(b, 0) / bucket)))
        return ("t", "running", "start_rate"), rows
    raise UnknownFigureId(f"no figure analog {fig}; known: {', '.join(map(str, FIGURES))}")


def _busy_cores(events, total_cores: int):
    pat = re.compile(r"\bcores=(\d+)")
    cores_of: dict[str, int] = {}
    changes = []
    for ev in events:
        if not ev.is_task:
            continue
        if ev.state is TaskState.RUNNING:
            m = pat.search(ev.detail or "")
            c = int(m.group(1)) if m else 1
            cores_of[ev.uid] = c
            changes.append((ev.ts, c))
        elif ev.state.terminal and ev.uid in cores_of:
            changes.append((ev.ts, -cores_of.pop(ev.uid)))
    changes.sort(key=lambda x: (x[0], x[1]))
    rows, busy = [], 0
    for i, (t, d) in enumerate(changes):
        busy += d
        if i + 1 == len(changes) or changes[i + 1][0] != t:
            rows.append((_fmt(t), busy, _fmt(100.0 * busy / total_cores)))
    return rows


def emit_plotdata(result, fig: int, out_dir: str | Path) -> Path:
    if fig not in FIGURES:
        raise UnknownFigureId(f"no figure analog {fig}; known: {', '.join(map(str, FIGURES))}")
    if result.report is None:
        raise ValueError("emit_plotdata needs a complete metrics report")
    header, rows = fig_rows(result, fig)
    return _write(Path(out_dir) / f"fig_analog_{fig}.csv", header, rows)


__all__ = ["FIGURES", "UnknownFigureId", "emit_plotdata", "fig_rows"]
