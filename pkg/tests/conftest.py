from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from pilotrt.agent import Agent, RoutingPolicy
from pilotrt.backends import SIM_CLASSES, BackendFamily, BackendParams
from pilotrt.core import Pilot, TaskEvent, TaskState
from pilotrt.resources import NodeSpec, build_allocation, partition_allocation
from pilotrt.simclock import Quiescent, SimClock

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class Rig:
    """A small SIM pilot: clock, instances over disjoint partitions, agent."""

    clock: SimClock
    pilot: Pilot
    agent: Agent
    instances: list
    alloc: object
    steps: int = 0
    observers: list = field(default_factory=list)

    def run(self, until: float | None = None) -> float:
        self.agent.pump_events(self.clock.now)
        while True:
            nxt = self.clock.peek()
            if nxt is None or (until is not None and nxt > until):
                return self.clock.now
            t, batch = self.clock.advance()
            for ev in batch:
                ev.fire()
            self.agent.pump_events(t)
            self.steps += 1
            for obs in self.observers:
                obs(self)

    def by_id(self, iid: str):
        return self.agent.by_id[iid]


def make_rig(families, nodes: int = 4, cpn: int = 56, gpn: int = 8, params: dict | None = None,
             kwargs: dict | None = None, dispatch_latency_s: float = 0.0, policy: RoutingPolicy | None = None,
             hang: set | None = None, fail_at: dict | None = None, max_retries: int = 1,
             time_scale: float = 1.0) -> Rig:
    """``families`` is a list like ``["hierarchical", "workerpool"]``; ids are ``<family>.<k>``."""
    alloc = build_allocation(nodes, NodeSpec(cpn, gpn))
    parts = partition_allocation(alloc, len(families))
    clock = SimClock()
    pilot = Pilot("pilot.test", alloc, time_scale)
    params = params or {}
    kwargs = kwargs or {}
    hang = hang or set()
    fail_at = fail_at or {}
    counts: dict[str, int] = {}
    instances = []
    for fam_name, part in zip(families, parts):
        fam = BackendFamily(fam_name)
        k = counts.get(fam_name, 0)
        counts[fam_name] = k + 1
        iid = f"{fam_name}.{k}"
        p = params.get(fam_name, BackendParams.defaults(fam))
        instances.append(SIM_CLASSES[fam](iid, part, p, clock, hang=iid in hang, fail_at=fail_at.get(iid),
                                          **kwargs.get(fam_name, {})))
    pilot.backends = instances
    agent = Agent(pilot, instances, policy, clock=clock, dispatch_latency_s=dispatch_latency_s,
                  max_retries=max_retries)
    return Rig(clock, pilot, agent, instances, alloc)


@pytest.fixture
def rig_factory():
    return make_rig


def drain(clock: SimClock) -> None:
    while True:
        try:
            clock.step()
        except Quiescent:
            return


def task_log(*rows) -> list[TaskEvent]:
    """Build events from ``(ts, uid, state[, partition, backend, detail])`` tuples."""
    out = []
    for r in rows:
        ts, uid, state, *rest = r
        part, backend, detail = (list(rest) + [None, None, None])[:3]
        out.append(TaskEvent(float(ts), uid, TaskState(state), part, backend, detail))
    return out


def lifecycle(uid: str, start: float, end: float, cores: int = 1, final: str = "DONE") -> list[TaskEvent]:
    return task_log(
        (start, uid, "NEW"), (start, uid, "SCHEDULED"), (start, uid, "SUBMITTED"),
        (start, uid, "RUNNING", 0, "b.0", f"sub=x cores={cores} gpus=0"),
        (end, uid, final, 0, "b.0"),
    )
