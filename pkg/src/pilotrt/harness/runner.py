"""Build a pilot from a config, run it on the virtual or the wall clock, and write artifacts."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from ..agent import Agent, RoutingPolicy, Selection
from ..analytics import MetricsReport, report
from ..backends.base import BackendFamily, BackendInstance, BackendParams, Lifecycle, SubState
from ..backends import SIM_CLASSES
from ..core import Modality, Pilot, Task, TaskEvent, write_event_log
from ..resources import Allocation, NodeSpec, build_allocation, partition_allocation
from ..simclock import Quiescent, SimClock
from ..workloads import (DEFAULT_STAGES, Campaign, WorkloadKind, WorkloadSpec, adaptive_scale,
                         generate_campaign, generate_uniform)
from .config import FAMILY_SECTION, ExperimentConfig, Mode

log = logging.getLogger(__name__)

FAMILY_ORDER = (BackendFamily.CAPPED, BackendFamily.HIERARCHICAL, BackendFamily.WORKERPOOL)
REAL_DEFAULT_TIMEOUT_S = 600.0


class RunTimeout(RuntimeError):
    pass


@dataclass
class RunArtifacts:
    out_dir: Path
    events: Path
    metrics: Path | None
    plotdata: dict[int, Path]
    config: Path
    summary: Path


@dataclass
class RunResult:
    config: ExperimentConfig
    allocation: Allocation
    pilot: Pilot
    agent: Agent
    instances: list[BackendInstance]
    status: str
    wall_s: float
    sim_end: float | None = None
    report: MetricsReport | None = None
    report_error: str | None = None
    artifacts: RunArtifacts | None = None
    campaign: Campaign | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def events(self) -> list[TaskEvent]:
        return self.pilot.events


def allocation_for(cfg: ExperimentConfig) -> Allocation:
    spec = NodeSpec(cfg.cores_per_node, cfg.get("allocation", "gpus_per_node"), cfg.get("allocation", "smt"))
    return build_allocation(cfg.nodes, spec)


def backend_params(cfg: ExperimentConfig, family: BackendFamily) -> BackendParams:
    return BackendParams(
        bootstrap_s=cfg.family_value(family, "bootstrap_s"),
        launch_latency_s=cfg.family_value(family, "launch_latency_s"),
        startup_timeout_s=cfg.get("backend", "startup_timeout_s"),
        bootstrap_jitter=cfg.get("backend", "bootstrap_jitter"),
    )


def family_kwargs(cfg: ExperimentConfig, family: BackendFamily) -> dict:
    if family is BackendFamily.CAPPED:
        return {"cap": cfg.get("capped", "cap"), "latency_per_node_s": cfg.get("capped", "latency_per_node_s")}
    if family is BackendFamily.HIERARCHICAL:
        return {"policy": cfg.get("hier", "policy")}
    return {"workers_per_node": cfg.get("pool", "workers_per_node"),
            "rule": cfg.get("pool", "dispatch_rule"),
            "spawn_latency_s": cfg.get("pool", "spawn_latency_s")}


def build_instances(cfg: ExperimentConfig, alloc: Allocation, clock: SimClock | None = None,
                    time_fn: Callable[[], float] | None = None, fail_at: dict[str, float] | None = None,
                    hang: set[str] | None = None) -> list[BackendInstance]:
    counts = cfg.instance_counts()
    plan = [(f, k) for f in FAMILY_ORDER for k in range(counts[f])]
    parts = partition_allocation(alloc, len(plan))
    fail_at = fail_at or {}
    hang = hang or set()
    out = []
    for idx, ((family, k), part) in enumerate(zip(plan, parts)):
        iid = f"{FAMILY_SECTION[family]}.{k}"
        params = backend_params(cfg, family)
        kw = family_kwargs(cfg, family)
        if cfg.mode is Mode.SIM:
            out.append(SIM_CLASSES[family](iid, part, params, clock, seed=cfg.seed * 1000 + idx,
                                           hang=iid in hang, fail_at=fail_at.get(iid), **kw))
        else:
            from ..backends.real import REAL_CLASSES

            if family is BackendFamily.WORKERPOOL:
                kw = {"workers_per_node": kw["workers_per_node"]}
            elif family is BackendFamily.CAPPED:
                kw = {"cap": kw["cap"]}
            out.append(REAL_CLASSES[family](iid, part, params, time_fn=time_fn, **kw))
    return out


def campaign_stages(cfg: ExperimentConfig):
    stages = []
    for st in DEFAULT_STAGES:
        over = cfg.stages.get(st.name, {})
        stages.append(replace(st, **over) if over else st)
    return tuple(stages)


class CampaignDriver:
    """Submits campaign stages as waves and grows the adaptive stage into idle capacity."""

    def __init__(self, campaign: Campaign, agent: Agent, alloc: Allocation, fraction: float = 1.0,
                 adaptive: bool = True, ceiling: float = 1.2):
        self.campaign = campaign
        self.agent = agent
        self.alloc = alloc
        self.fraction = fraction
        self.adaptive = adaptive
        self.ceiling_factor = ceiling
        self.stage = -1
        self.submitted = [0] * len(campaign.stages)
        self.finished = [0] * len(campaign.stages)
        self.extra = [0] * len(campaign.stages)
        self.stage_started: list[float | None] = [None] * len(campaign.stages)
        self._index = {s.name: k for k, s in enumerate(campaign.stages)}
        self._advancing = False
        agent.on_terminal.append(self._on_terminal)
        agent.on_capacity_freed.append(self._on_capacity)

    def start(self) -> None:
        self._advance()

    def _advance(self) -> None:
        if self._advancing:
            return
        self._advancing = True
        try:
            self._advance_loop()
        finally:
            self._advancing = False

    def _advance_loop(self) -> None:
        while self.stage + 1 < len(self.campaign.stages):
            self.stage += 1
            k = self.stage
            self.stage_started[k] = self.agent.now()
            tasks = self.campaign.tasks[k]
            self.submitted[k] += len(tasks)
            self.agent.submit_workload(tasks)
            self._adapt()
            if not self._stage_complete(k):
                return

    def _stage_complete(self, k: int) -> bool:
        return self.finished[k] >= self.fraction * self.submitted[k]

    def _on_terminal(self, task: Task, at: float) -> None:
        k = self._index.get(task.desc.stage)
        if k is None or task.origin is not None:
            return
        self.finished[k] += 1
        if k == self.stage and self._stage_complete(k):
            self._advance()

    def _on_capacity(self, inst, at: float) -> None:
        self._adapt()

    def idle_cores(self) -> int:
        free = 0
        queued = sum(t.desc.cores for q in self.agent.queues.values() for _, t in q)
        for b in self.agent.instances:
            if b.lifecycle is not Lifecycle.READY:
                continue
            free += b.slotmap.capacity_cores - b.slotmap.used_cores
            queued += sum(s.desc.cores for s in b.submissions.values() if s.state is SubState.QUEUED)
        return free - queued

    def _adapt(self) -> None:
        k = self.stage
        if not self.adaptive or k < 0 or not self.campaign.stages[k].adaptive:
            return
        stage = self.campaign.stages[k]
        generated = self.campaign.generated[k]
        current = self.submitted[k]
        ceiling = int(round(self.ceiling_factor * generated))
        n = adaptive_scale(self.idle_cores(), stage, current, self.alloc, ceiling)
        if n > 0:
            new = self.campaign.draw(k, n)
            self.submitted[k] += n
            self.extra[k] += n
            self.agent.submit_workload(new)


def build_workload(cfg: ExperimentConfig, alloc: Allocation):
    kind = WorkloadKind(cfg.get("workload", "kind"))
    if kind is WorkloadKind.CAMPAIGN:
        return generate_campaign(alloc.node_count, alloc.spec, cfg.workload_seed, campaign_stages(cfg),
                                 scaled=cfg.get("campaign", "scaled"), total=cfg.get("campaign", "total"))
    spec = WorkloadSpec(kind, cfg.get("workload", "duration_s"), cfg.get("workload", "count"),
                        cfg.get("workload", "mix_func"), cfg.workload_seed)
    return generate_uniform(spec, alloc)


def _policy(cfg: ExperimentConfig) -> RoutingPolicy:
    return RoutingPolicy({m: cfg.families_for(m) for m in Modality}, Selection(cfg.get("agent", "selection")))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, write: bool = True,
                   fail_at: dict[str, float] | None = None, hang: set[str] | None = None,
                   on_step: Callable[[RunResult], None] | None = None) -> RunResult:
    wall0 = time.perf_counter()
    alloc = allocation_for(cfg)
    pilot = Pilot(f"pilot.{cfg.exp_id}", alloc, cfg.time_scale)
    sim = cfg.mode is Mode.SIM
    clock = SimClock() if sim else None
    t0 = time.monotonic()
    time_fn = None if sim else (lambda: time.monotonic() - t0)
    instances = build_instances(cfg, alloc, clock, time_fn, fail_at, hang)
    pilot.backends = instances
    agent = Agent(pilot, instances, _policy(cfg), clock=clock, time_fn=time_fn,
                  dispatch_latency_s=cfg.get("agent", "dispatch_latency_s") if sim else 0.0,
                  start_barrier=cfg.get("agent", "start_barrier"), max_retries=cfg.get("agent", "max_retries"))
    workload = build_workload(cfg, alloc)
    result = RunResult(cfg, alloc, pilot, agent, instances, "running", 0.0)

    agent.bootstrap()
    if isinstance(workload, Campaign):
        result.campaign = workload
        driver = CampaignDriver(workload, agent, alloc, cfg.get("campaign", "completion_fraction"),
                                cfg.get("campaign", "adaptive"), cfg.get("campaign", "ceiling"))
        driver.start()
        result.extras["driver"] = driver
    else:
        agent.submit_workload(workload)

    timeout = cfg.get("experiment", "timeout_s")
    try:
        if sim:
            result.sim_end = _run_sim(clock, agent, result, timeout, on_step)
        else:
            _run_real(agent, pilot, instances, cfg, timeout)
        result.status = "complete" if pilot.quiescent() else "stalled"
    except RunTimeout as exc:
        log.warning("%s", exc)
        result.status = "timeout"
    finally:
        if not sim:
            for b in instances:
                b.shutdown()
    result.wall_s = time.perf_counter() - wall0

    try:
        result.report = report(pilot.events, alloc, cfg.get("experiment", "bucket_s"),
                               cfg.get("experiment", "throughput_window"))
    except ValueError as exc:
        result.report_error = f"{type(exc).__name__}: {exc}"
    if write:
        result.artifacts = write_artifacts(result, Path(out_dir) if out_dir else Path(cfg.output_dir) / cfg.exp_id)
    return result


def _run_sim(clock: SimClock, agent: Agent, result: RunResult, timeout, on_step) -> float:
    agent.pump_events(clock.now)
    while True:
        try:
            t, batch = clock.advance()
        except Quiescent:
            return clock.now
        for ev in batch:
            ev.fire()
        agent.pump_events(t)
        if on_step is not None:
            on_step(result)
        if timeout is not None and t > timeout:
            raise RunTimeout(f"sim time {t} exceeded timeout {timeout}")


def _run_real(agent: Agent, pilot: Pilot, instances, cfg: ExperimentConfig, timeout) -> None:
    interval = cfg.get("agent", "pump_interval_s")
    deadline = time.monotonic() + (timeout or REAL_DEFAULT_TIMEOUT_S)
    while True:
        agent.pump_events()
        with agent._lock:
            agent._kick()
        if pilot.quiescent() and agent.idle():
            agent.pump_events()
            return
        if time.monotonic() > deadline:
            raise RunTimeout("real run exceeded its timeout")
        time.sleep(interval)


def write_artifacts(result: RunResult, out_dir: Path) -> RunArtifacts:
    from .plotdata import emit_plotdata

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    events = write_event_log(out_dir / "events.tsv", result.pilot.events)
    metrics = None
    plots: dict[int, Path] = {}
    if result.report is not None:
        metrics = result.report.write(out_dir)["metrics"]
        for fig in cfg.figures():
            plots[fig] = emit_plotdata(result, fig, out_dir)
    config = out_dir / "config.ini"
    echo = cfg.source_text
    if cfg.overrides:
        echo += "\n# overrides\n" + "".join(f"# {o}\n" for o in cfg.overrides)
    config.write_text(echo, encoding="utf-8")
    (out_dir / "config.effective.ini").write_text(cfg.to_ini(), encoding="utf-8")
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps({
        "exp_id": cfg.exp_id,
        "mode": cfg.mode.value,
        "status": result.status,
        "partial": result.status != "complete",
        "wall_s": result.wall_s,
        "sim_end": result.sim_end,
        "seed": cfg.seed,
        "time_scale": cfg.time_scale,
        "events": len(result.pilot.events),
        "report_error": result.report_error,
    }, indent=2) + "\n", encoding="utf-8")
    return RunArtifacts(out_dir, events, metrics, plots, config, summary)
