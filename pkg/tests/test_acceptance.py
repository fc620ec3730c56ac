"""Acceptance criteria A1..A11. Each test records one PASS/FAIL line before asserting."""

import math
import random
import time
from collections import Counter

import pytest

from pilotrt.analytics import max_concurrency, utilization
from pilotrt.backends import BackendFamily, BackendParams
from pilotrt.core import Modality, TaskDescription, TaskState, validate_event_log
from pilotrt.harness.config import Mode, load_config, preset_names
from pilotrt.harness.runner import run_experiment
from pilotrt.resources import NodeSpec, build_allocation
from pilotrt.workloads import adaptive_floor, generate_campaign

import conftest
from conftest import make_rig
from oracles import brute_max_concurrency, brute_utilization, random_legal_log


def record(cid: str, ok: bool, text: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"{cid:<4}{'PASS' if ok else 'FAIL'}  {text}")


def sim(name, overrides=()):
    t0 = time.perf_counter()
    res = run_experiment(load_config(name, ["experiment.repetitions=1", *overrides]), write=False)
    return res, time.perf_counter() - t0


def test_a1_capped_ceiling():
    res, wall = sim("srun_4n")
    rep = res.report
    ok = (rep.max_concurrency == 112 and abs(rep.utilization_pct - 50.0) <= 0.01
          and abs(rep.makespan_s - 1440.0) <= 0.01 and wall < 5)
    record("A1", ok, f"cap ceiling: plateau={rep.max_concurrency} util={rep.utilization_pct:.4f}% "
                     f"makespan={rep.makespan_s:.3f}s wall={wall:.1f}s")
    assert rep.max_concurrency == 112
    assert rep.utilization_pct == pytest.approx(50.0, abs=0.01)
    assert rep.makespan_s == pytest.approx(1440.0, abs=0.01)
    assert wall < 5


def test_a2_ceiling_removed():
    res, wall = sim("srun_4n", ["partitions.capped=0", "partitions.hierarchical=1"])
    rep = res.report
    boot = res.config.family_value(BackendFamily.HIERARCHICAL, "bootstrap_s")
    ok = (rep.max_concurrency == 224 and rep.utilization_pct >= 99.5
          and abs(rep.makespan_s - (720.0 + boot)) <= 1.0 and wall < 5)
    record("A2", ok, f"ceiling removed: plateau={rep.max_concurrency} util={rep.utilization_pct:.4f}% "
                     f"makespan={rep.makespan_s:.3f}s (720+{boot:g}) wall={wall:.1f}s")
    assert rep.max_concurrency == 224
    assert rep.utilization_pct >= 99.5
    assert rep.makespan_s == pytest.approx(720.0 + boot, abs=1.0)
    assert wall < 5


def test_a3_multi_instance_throughput():
    t0 = time.perf_counter()
    one, _ = sim("flux1_4n")
    four, _ = sim("flux4_4n")
    wall = time.perf_counter() - t0
    ratio = four.report.avg_throughput / one.report.avg_throughput
    ok = ratio > 1.3 and 1.1 <= ratio <= 2.5 and wall < 30
    record("A3", ok, f"multi-instance throughput: {four.report.avg_throughput:.2f}/"
                     f"{one.report.avg_throughput:.2f} = {ratio:.3f} wall={wall:.1f}s")
    assert ratio > 1.3 and 1.1 <= ratio <= 2.5
    assert wall < 30


def test_a4_hybrid_utilization():
    res, wall = sim("hybrid_16n")
    rep = res.report
    by_mod = Counter((t.desc.modality, t.state) for t in res.pilot.registry.values())
    n_exec = sum(v for (m, _), v in by_mod.items() if m is Modality.EXECUTABLE)
    n_func = sum(v for (m, _), v in by_mod.items() if m is Modality.FUNCTION)
    all_done = (by_mod[(Modality.EXECUTABLE, TaskState.DONE)] == n_exec > 0
                and by_mod[(Modality.FUNCTION, TaskState.DONE)] == n_func > 0)
    ok = rep.utilization_pct >= 99.6 and all_done and wall < 30
    record("A4", ok, f"hybrid utilization: {rep.utilization_pct:.4f}% exec {n_exec} func {n_func} "
                     f"all DONE={all_done} wall={wall:.1f}s")
    assert rep.utilization_pct >= 99.6
    assert all_done
    assert wall < 30


def test_a5_overhead_not_additive():
    res, wall = sim("hybrid_16n", ["partitions.hierarchical=4", "partitions.workerpool=4", "allocation.nodes=8"])
    rep = res.report
    fam = {b.id: b.family for b in res.instances}
    want = {BackendFamily.HIERARCHICAL: 20.0, BackendFamily.WORKERPOOL: 9.0}
    exact = all(v == want[fam[iid]] for iid, v in rep.per_instance_overhead_s.items())
    total = sum(rep.per_instance_overhead_s.values())
    ok = exact and len(rep.per_instance_overhead_s) == 8 and rep.aggregate_overhead_s == 20.0 and wall < 10
    record("A5", ok, f"overhead: per-instance exact={exact} aggregate={rep.aggregate_overhead_s:g}s "
                     f"(sum would be {total:g}s) wall={wall:.1f}s")
    assert exact and len(rep.per_instance_overhead_s) == 8
    assert rep.aggregate_overhead_s == 20.0 and total == 116.0
    assert wall < 10


@pytest.mark.slow
def test_a6_campaign_makespan():
    t0 = time.perf_counter()
    capped, _ = sim("impeccable_srun_256n")
    hier, _ = sim("impeccable_flux_256n")
    wall = time.perf_counter() - t0
    ratio = hier.report.makespan_s / capped.report.makespan_s
    complete = capped.status == hier.status == "complete"
    ok = ratio <= 0.7 and complete and wall < 60
    record("A6", ok, f"campaign makespan: hier {hier.report.makespan_s:.4f}s / capped "
                     f"{capped.report.makespan_s:.4f}s = {ratio:.4f} wall={wall:.1f}s")
    assert complete
    assert ratio <= 0.7
    assert wall < 60


def test_a7_campaign_floor():
    t0 = time.perf_counter()
    parts = []
    ok = True
    for nodes in (256, 1024):
        camp = generate_campaign(nodes)
        k = next(i for i, s in enumerate(camp.stages) if s.adaptive)
        n = len(camp.tasks[k])
        need = math.ceil(102 * nodes / 128)
        ok &= n >= need and adaptive_floor(nodes) == need
        parts.append(f"{nodes}n: {n}>={need}")
    wall = time.perf_counter() - t0
    ok &= wall < 5
    record("A7", ok, f"campaign floor: {'; '.join(parts)} wall={wall:.1f}s")
    assert ok


def test_a8_oracle_equivalence():
    t0 = time.perf_counter()
    worst, conc_bad = 0.0, 0
    alloc = build_allocation(1, NodeSpec(64, 0))
    for seed in range(1000):
        rnd = random.Random(seed)
        log = random_legal_log(rnd, rnd.randint(1, 40), grid=rnd.choice([None, 1.0, 5.0]))
        lo = min(e.ts for e in log if e.state is TaskState.RUNNING)
        hi = max(e.ts for e in log if e.is_task and e.state.terminal)
        if hi > lo:
            want = brute_utilization(log, 64)
            got = utilization(log, alloc).pct
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300) if want else abs(got))
        conc_bad += max_concurrency(log) != brute_max_concurrency(log)
    wall = time.perf_counter() - t0
    ok = worst <= 1e-9 and conc_bad == 0 and wall < 60
    record("A8", ok, f"oracle equivalence: 1000 logs, worst util rel err {worst:.2e}, "
                     f"concurrency mismatches {conc_bad} wall={wall:.1f}s")
    assert worst <= 1e-9 and conc_bad == 0
    assert wall < 60


FAMILIES = ["capped", "hierarchical", "workerpool"]


def _random_run(seed: int):
    """A small randomized SIM run; returns a list of invariant violations."""
    rnd = random.Random(seed)
    fams = [rnd.choice(FAMILIES) for _ in range(rnd.randint(1, 3))]
    nodes = rnd.randint(len(fams), 4)
    cpn = rnd.randint(2, 8)
    victim = None
    fail_at = {}
    if rnd.random() < 0.4:
        k = rnd.randrange(len(fams))
        victim = f"{fams[k]}.{fams[:k].count(fams[k])}"
        fail_at[victim] = rnd.uniform(0, 40)
    params = {f: BackendParams(rnd.choice([0.0, 1.0, 9.0]), rnd.choice([0.0, 0.01, 0.5])) for f in FAMILIES}
    kwargs = {"capped": {"cap": rnd.randint(1, 4)}}
    rig = make_rig(fams, nodes=nodes, cpn=cpn, gpn=0, params=params, kwargs=kwargs, fail_at=fail_at,
                   dispatch_latency_s=rnd.choice([0.0, 0.0057]), max_retries=0)
    problems = []

    def check_slots(r):
        for b in r.instances:
            if not b.slotmap.conserved():
                problems.append(f"slots not conserved on {b.id} at t={r.clock.now}")
            if b.family is BackendFamily.CAPPED and b.state.in_flight > b.state.cap:
                problems.append(f"cap exceeded on {b.id}")

    rig.observers.append(check_slots)
    rig.agent.bootstrap()
    has_pool = "workerpool" in fams
    has_exec = bool({"capped", "hierarchical"} & set(fams))
    descs = []
    for i in range(rnd.randint(1, 40)):
        mod = Modality.FUNCTION if has_pool and rnd.random() < 0.4 else Modality.EXECUTABLE
        dur = rnd.choice([None, rnd.uniform(0.1, 30.0)])
        descs.append(TaskDescription(f"t{i}", mod, rnd.randint(1, cpn), 0, dur))
    rig.agent.submit_workload(descs)
    rig.run()

    events = rig.pilot.events
    viol = validate_event_log(events)
    if not viol.legal:
        problems.append(f"illegal log: {list(viol)[:3]}")
    terminal = Counter(e.uid for e in events if e.is_task and e.state.terminal)
    admitted = {e.uid for e in events if e.is_task and e.state is TaskState.NEW}
    if any(terminal[u] != 1 for u in admitted):
        problems.append("a task lacks exactly one terminal event")
    survivors = {b.id for b in rig.instances if b.id != victim}
    for t in rig.pilot.registry.values():
        if t.state is TaskState.FAILED and t.instance_id in survivors:
            problems.append(f"{t.uid} failed on surviving instance {t.instance_id}")
        routable = has_pool if t.desc.modality is Modality.FUNCTION else has_exec
        if not routable and t.state is not TaskState.FAILED:
            problems.append(f"{t.uid} had no eligible backend yet ended {t.state.value}")
        if victim is None and routable and t.state is not TaskState.DONE:
            problems.append(f"{t.uid} ended {t.state.value} without any failure injected")
    return problems


@pytest.mark.slow
def test_a9_state_and_slot_invariants():
    t0 = time.perf_counter()
    bad = {}
    for seed in range(500):
        p = _random_run(seed)
        if p:
            bad[seed] = p
    wall = time.perf_counter() - t0
    ok = not bad and wall < 300
    first = next(iter(bad.items()), None)
    record("A9", ok, f"state/slot invariants: 500 seeds, {len(bad)} with violations wall={wall:.1f}s"
                     + (f" first={first}" if first else ""))
    assert not bad, first
    assert wall < 300


def test_a10_determinism_and_time_scale():
    t0 = time.perf_counter()
    logs_equal = {}
    for name in preset_names():
        cfg = load_config(name, ["experiment.repetitions=1"])
        if cfg.mode is not Mode.SIM or name.startswith("impeccable"):
            continue
        a = run_experiment(cfg, write=False).events
        b = run_experiment(load_config(name, ["experiment.repetitions=1"]), write=False).events
        logs_equal[name] = a == b
    base, _ = sim("srun_4n")
    fast, _ = sim("srun_4n", ["experiment.time_scale=0.1"])
    du = abs(fast.report.utilization_pct - base.report.utilization_pct) / base.report.utilization_pct
    tp = fast.report.avg_throughput / base.report.avg_throughput
    wall = time.perf_counter() - t0
    ok = all(logs_equal.values()) and du <= 1e-9 and abs(tp / 10 - 1) <= 1e-6 and wall < 30
    record("A10", ok, f"determinism: {sum(logs_equal.values())}/{len(logs_equal)} presets identical; "
                      f"time_scale 0.1: util rel diff {du:.1e}, throughput x{tp:.9f} wall={wall:.1f}s")
    assert all(logs_equal.values()), logs_equal
    assert du <= 1e-9
    assert tp == pytest.approx(10.0, rel=1e-6)
    assert wall < 30


def test_a10_campaign_determinism(tmp_path):
    a = run_experiment(load_config("impeccable_flux_256n", ["allocation.nodes=32"]), tmp_path / "a")
    b = run_experiment(load_config("impeccable_flux_256n", ["allocation.nodes=32"]), tmp_path / "b")
    assert a.artifacts.events.read_bytes() == b.artifacts.events.read_bytes()


@pytest.mark.real
def test_a11_real_smoke(tmp_path):
    t0 = time.perf_counter()
    res = run_experiment(load_config("hybrid_2n"), tmp_path)
    wall = time.perf_counter() - t0
    reg = res.pilot.registry.values()
    n_exec = sum(t.desc.modality is Modality.EXECUTABLE and t.state is TaskState.DONE for t in reg)
    n_func = sum(t.desc.modality is Modality.FUNCTION and t.state is TaskState.DONE for t in reg)
    legal = validate_event_log(res.events).legal
    func_done = [e for e in res.events if e.state is TaskState.DONE and e.backend and e.backend.startswith("pool")]
    no_spawn = len(func_done) == 64 and all("spawned=0" in (e.detail or "") for e in func_done)
    ok = res.status == "complete" and n_exec == 64 and n_func == 64 and legal and no_spawn and wall < 120
    record("A11", ok, f"real smoke: exec {n_exec}/64 func {n_func}/64 DONE, legal={legal}, "
                      f"zero child spawns={no_spawn} wall={wall:.1f}s")
    assert res.status == "complete"
    assert n_exec == 64 and n_func == 64
    assert legal and no_spawn
    assert wall < 120
