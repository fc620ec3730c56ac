"""Backend contract tests shared by the three SIM families, plus the capped launcher."""

import pytest
from hypothesis import given, settings, strategies as st

from pilotrt.backends import (NULL_EPSILON, AlreadyTerminal, BackendFamily, BackendParams, CappedBackend, CapState,
                              EventKind, HierarchicalBackend, Lifecycle, Rejected, UnknownSubmission,
                              WorkerPoolBackend)
from pilotrt.core import Modality, TaskDescription
from pilotrt.resources import NodeSpec, build_allocation, partition_allocation
from pilotrt.simclock import SimClock

from conftest import drain

CLASSES = {
    BackendFamily.CAPPED: CappedBackend,
    BackendFamily.HIERARCHICAL: HierarchicalBackend,
    BackendFamily.WORKERPOOL: WorkerPoolBackend,
}


def make(family, nodes=4, params=None, clock=None, **kw):
    part = partition_allocation(build_allocation(nodes, NodeSpec()), 1)[0]
    clock = clock or SimClock()
    b = CLASSES[family](f"{family.value}.0", part, params or BackendParams.defaults(family), clock, **kw)
    return b, clock


def ready(family, **kw):
    b, clock = make(family, **kw)
    b.bootstrap()
    drain(clock)
    assert b.lifecycle is Lifecycle.READY
    b.poll_events()
    return b, clock


def exe(uid, **kw):
    return TaskDescription(uid, Modality.EXECUTABLE, **kw)


def fn(uid, **kw):
    return TaskDescription(uid, Modality.FUNCTION, **kw)


def kinds(events):
    return [e.kind for e in events]


@pytest.mark.parametrize("family,boot", [(BackendFamily.HIERARCHICAL, 20.0), (BackendFamily.WORKERPOOL, 9.0),
                                         (BackendFamily.CAPPED, 0.0)])
def test_default_bootstrap(family, boot):
    b, clock = make(family)
    clock.now = 3.0
    b.bootstrap()
    drain(clock)
    evs = b.poll_events()
    assert kinds(evs) == [EventKind.READY] and evs[0].ts == 3.0 + boot


def test_bootstrap_timeout():
    b, clock = make(BackendFamily.HIERARCHICAL, params=BackendParams(120.0, 0.01, startup_timeout_s=60.0))
    b.bootstrap()
    drain(clock)
    (ev,) = b.poll_events()
    assert ev.kind is EventKind.INSTANCE_FAILED and ev.detail == "BootstrapTimeout" and ev.ts == 60.0
    assert b.lifecycle is Lifecycle.FAILED


@pytest.mark.parametrize("family", list(CLASSES))
def test_hang_hook_times_out(family):
    b, clock = make(family, hang=True)
    b.bootstrap()
    drain(clock)
    assert kinds(b.poll_events()) == [EventKind.INSTANCE_FAILED]


def test_func_to_capped_rejected():
    b, _ = ready(BackendFamily.CAPPED)
    with pytest.raises(Rejected) as ei:
        b.submit(fn("f"))
    assert ei.value.reason == "UnsupportedModality"


def test_exec_to_hierarchical_accepted():
    b, clock = ready(BackendFamily.HIERARCHICAL)
    sid = b.submit(exe("e", duration=1.0))
    assert sid == "hierarchical.0.0" and b.submissions[sid].uid == "e"


@pytest.mark.parametrize("family", list(CLASSES))
def test_oversize_rejected(family):
    b, _ = ready(family)
    desc = exe("big", cores=7168) if family is not BackendFamily.WORKERPOOL else fn("big", cores=7168)
    with pytest.raises(Rejected) as ei:
        b.submit(desc)
    assert ei.value.reason == "NeverFits"


def test_not_ready_rejected():
    b, _ = make(BackendFamily.HIERARCHICAL)
    with pytest.raises(Rejected, match="NotReady"):
        b.submit(exe("e"))


@pytest.mark.parametrize("family", list(CLASSES))
def test_null_task_running_then_done_eps(family):
    b, clock = ready(family, params=BackendParams(0.0, 0.0))
    if family is BackendFamily.WORKERPOOL:
        b.spawn_latency_s = 0.0
    clock.now = 30.0
    desc = fn("n") if family is BackendFamily.WORKERPOOL else exe("n")
    b.submit(desc)
    drain(clock)
    evs = [e for e in b.poll_events() if e.kind is not EventKind.CAPACITY_FREED]
    assert kinds(evs) == [EventKind.TASK_RUNNING, EventKind.TASK_DONE]
    assert evs[0].ts == 30.0 and evs[1].ts == pytest.approx(30.0 + NULL_EPSILON)
    assert b.poll_events() == []


def test_poll_respects_up_to():
    b, clock = ready(BackendFamily.HIERARCHICAL, params=BackendParams(0.0, 0.0))
    b.submit(exe("e", duration=10.0))
    drain(clock)
    assert kinds(b.poll_events(5.0)) == [EventKind.TASK_RUNNING]
    assert EventKind.TASK_DONE in kinds(b.poll_events(10.0))


@pytest.mark.parametrize("family", list(CLASSES))
def test_cancel_queued_never_runs(family):
    b, clock = ready(family, nodes=1)
    make_desc = fn if family is BackendFamily.WORKERPOOL else exe
    sids = [b.submit(make_desc(f"t{i}", cores=56, duration=100.0)) for i in range(2)]
    b.cancel(sids[1])
    drain(clock)
    evs = [e for e in b.poll_events() if e.uid == "t1"]
    assert kinds(evs) == [EventKind.TASK_CANCELED]


@pytest.mark.parametrize("family", list(CLASSES))
def test_cancel_after_done(family):
    b, clock = ready(family)
    make_desc = fn if family is BackendFamily.WORKERPOOL else exe
    sid = b.submit(make_desc("t", duration=1.0))
    drain(clock)
    with pytest.raises(AlreadyTerminal):
        b.cancel(sid)
    with pytest.raises(UnknownSubmission):
        b.cancel("nope")


def test_cancel_running_frees_slots():
    b, clock = ready(BackendFamily.HIERARCHICAL, params=BackendParams(0.0, 0.0))
    sid = b.submit(exe("t", cores=10, duration=100.0))
    clock.step()
    clock.step()
    assert b.slotmap.used_cores == 10
    b.cancel(sid)
    assert b.slotmap.used_cores == 0 and b.slotmap.conserved()


@pytest.mark.parametrize("family", list(CLASSES))
def test_crash_fails_owned_tasks_then_instance(family):
    b, clock = ready(family, nodes=1)
    make_desc = fn if family is BackendFamily.WORKERPOOL else exe
    for i in range(80):
        b.submit(make_desc(f"t{i}", duration=500.0))
    clock.schedule_at(100.0, b.fail, "Crash")
    drain(clock)
    evs = b.poll_events()
    failed = [e for e in evs if e.kind is EventKind.TASK_FAILED]
    assert len(failed) == 80 and all(e.detail.startswith("InstanceFailed") for e in failed)
    assert evs[-1].kind is EventKind.INSTANCE_FAILED
    assert b.slotmap.used_cores == 0 and b.outstanding() == 0


def test_function_fail_payload():
    b, clock = ready(BackendFamily.WORKERPOOL)
    b.submit(fn("f", payload="fail:boom"))
    drain(clock)
    (ev,) = [e for e in b.poll_events() if e.kind is EventKind.TASK_FAILED]
    assert "boom" in ev.detail


# -- capped launcher --------------------------------------------------------------------------

def test_capstate_first_cap_launch():
    s = CapState(cap=112, launch_latency=0.0)
    got = [s.try_launch(i, 0.0) for i in range(200)]
    assert sum(g is not None for g in got) == 112 and len(s.wait_queue) == 88


def test_capstate_serializes_at_cap_one():
    s = CapState(cap=1, launch_latency=0.5)
    assert s.try_launch("a", 0.0) == 0.5
    assert s.try_launch("b", 0.0) is None
    assert s.on_task_complete(180.5) == [("b", 181.0)]


def test_capstate_completion_paths():
    s = CapState(cap=2, launch_latency=0.0)
    s.try_launch("a", 0)
    assert s.on_task_complete(1.0) == [] and s.in_flight == 0
    for x in "bcd":
        s.try_launch(x, 2.0)
    assert s.on_task_complete(3.0) == [("d", 3.0)] and s.in_flight == 2


def test_capstate_launch_latency_serial():
    s = CapState(cap=112, launch_latency=0.05)
    times = [s.try_launch(i, 0.0) for i in range(112)]
    assert times[-1] == pytest.approx(112 * 0.05)


def _capped_run(n, cap, dur, latency=0.0, nodes=4):
    b, clock = ready(BackendFamily.CAPPED, nodes=nodes, params=BackendParams(0.0, latency), cap=cap)
    for i in range(n):
        b.submit(exe(f"t{i}", duration=dur))
    drain(clock)
    return b, b.poll_events()


def test_capped_waves_oracle():
    """Hand-simulated wave schedule: ceil(N/cap) waves of equal duration."""
    b, evs = _capped_run(896, 112, 180.0)
    starts = sorted(e.ts for e in evs if e.kind is EventKind.TASK_RUNNING)
    ends = [e.ts for e in evs if e.kind is EventKind.TASK_DONE]
    assert starts == [180.0 * (i // 112) for i in range(896)]
    assert max(ends) == 1440.0


def test_capped_first_window_exactly_cap():
    _, evs = _capped_run(300, 112, 180.0)
    assert sum(1 for e in evs if e.kind is EventKind.TASK_RUNNING and e.ts < 180.0) == 112


def test_capped_fifo_launch_order():
    _, evs = _capped_run(250, 112, 7.0, latency=0.01)
    order = [int(e.uid[1:]) for e in evs if e.kind is EventKind.TASK_RUNNING]
    assert order == sorted(order)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 300), st.integers(1, 3), st.sampled_from([1, 2, 8]))
def test_capped_ceiling_property(cap, n, nodes, cores):
    b, clock = ready(BackendFamily.CAPPED, nodes=1, params=BackendParams(0.0, 0.0), cap=cap)
    b.partition.slotmap.cap_cores[:] = nodes * 4
    b.partition.slotmap.free_cores[:] = nodes * 4
    for i in range(n):
        b.submit(exe(f"t{i}", cores=min(cores, nodes * 4), duration=5.0))
    running, peak = 0, 0
    while clock.pending:
        clock.step()
        for e in b.poll_events():
            running += {EventKind.TASK_RUNNING: 1, EventKind.TASK_DONE: -1}.get(e.kind, 0)
            peak = max(peak, running)
        assert b.slotmap.conserved()
    per = min(cores, nodes * 4)
    assert peak == min(cap, n, (nodes * 4) // per)
