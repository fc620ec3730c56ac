import csv
import json

import pytest

from pilotrt.analytics import makespan
from pilotrt.core import TaskState, read_event_log, validate_event_log
from pilotrt.harness.config import load_config
from pilotrt.harness.plotdata import FIGURES, UnknownFigureId, emit_plotdata, fig_rows
from pilotrt.harness.runner import run_experiment

SMALL_CAMPAIGN = ["allocation.nodes=16", "experiment.time_scale=0.01"]


@pytest.fixture(scope="module")
def srun(tmp_path_factory):
    out = tmp_path_factory.mktemp("srun")
    return run_experiment(load_config("srun_4n"), out), out


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_artifacts_written(srun):
    res, out = srun
    names = {p.name for p in out.iterdir()}
    assert {"events.tsv", "metrics.csv", "throughput.csv", "concurrency.csv", "config.ini",
            "config.effective.ini", "summary.json"} <= names
    assert {f"fig_analog_{k}.csv" for k in FIGURES} <= names
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "complete" and summary["partial"] is False
    assert (out / "config.ini").read_text() == res.config.source_text


def test_event_file_roundtrip_and_legal(srun):
    res, out = srun
    back = read_event_log(out / "events.tsv")
    assert back == res.events
    assert validate_event_log(back).legal


def test_clock_end_equals_makespan(srun):
    res, _ = srun
    assert res.sim_end == makespan(res.events) == res.report.makespan_s


def test_fig3_cap_column(srun):
    _, out = srun
    rows = _csv(out / "fig_analog_3.csv")
    assert rows[0] == ["t", "running", "cap"]
    assert {r[2] for r in rows[1:]} == {"112"}
    assert max(int(r[1]) for r in rows[1:]) == 112


def test_sim_byte_identical(tmp_path):
    a = run_experiment(load_config("flux4_4n", ["experiment.repetitions=1"]), tmp_path / "a")
    b = run_experiment(load_config("flux4_4n", ["experiment.repetitions=1"]), tmp_path / "b")
    assert a.artifacts.events.read_bytes() == b.artifacts.events.read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_timeout_marks_partial(tmp_path):
    res = run_experiment(load_config("srun_4n", ["experiment.timeout_s=100"]), tmp_path)
    assert res.status == "timeout"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["partial"] is True
    assert (tmp_path / "events.tsv").exists()


def test_no_write_mode():
    res = run_experiment(load_config("flux1_4n", ["workload.count=10"]), write=False)
    assert res.artifacts is None and res.report.tasks_done == 10


def test_fig7_hybrid_rows(tmp_path):
    res = run_experiment(load_config("hybrid_16n", ["workload.count=64"]), write=False)
    rows = fig_rows(res, 7)[1]
    fams = {(fam, float(v)) for _, fam, v in rows}
    assert fams == {("hierarchical", 20.0), ("workerpool", 9.0)}
    assert len(rows) == 16


def test_fig5_per_instance(tmp_path):
    res = run_experiment(load_config("flux4_4n", ["experiment.repetitions=1"]), write=False)
    header, rows = fig_rows(res, 5)
    assert header == ("instance", "family", "starts", "avg_throughput")
    assert sum(r[2] for r in rows) == 896 and len(rows) == 4


def test_fig8_campaign_columns(tmp_path):
    res = run_experiment(load_config("impeccable_flux_256n", SMALL_CAMPAIGN), write=False)
    assert res.status == "complete"
    path = emit_plotdata(res, 8, tmp_path)
    rows = _csv(path)
    assert rows[0] == ["t", "running", "start_rate"]
    assert len(rows) > 1 and all(float(r[2]) >= 0 for r in rows[1:])


def test_fig6_busy_cores_bounded(srun):
    res, _ = srun
    rows = fig_rows(res, 6)[1]
    assert max(r[1] for r in rows) == 112 and rows[-1][1] == 0


def test_unknown_figure(srun, tmp_path):
    res, _ = srun
    with pytest.raises(UnknownFigureId):
        emit_plotdata(res, 2, tmp_path)
    with pytest.raises(UnknownFigureId):
        fig_rows(res, 9)


def test_campaign_adaptive_floor_met():
    res = run_experiment(load_config("impeccable_flux_256n", SMALL_CAMPAIGN), write=False)
    camp = res.campaign
    k = next(i for i, s in enumerate(camp.stages) if s.adaptive)
    assert len(camp.tasks[k]) >= camp.floor
    done = [e for e in res.events if e.is_task and e.state is TaskState.DONE]
    assert len(done) == len(camp.all_tasks())


def test_failure_injection_through_runner():
    cfg = load_config("flux4_4n", ["experiment.repetitions=1", "agent.max_retries=0", "workload.kind=dummy",
                                   "workload.duration_s=50"])
    res = run_experiment(cfg, write=False, fail_at={"hier.1": 30.0})
    assert res.status == "complete"
    failed = [t for t in res.pilot.registry.values() if t.state is TaskState.FAILED]
    assert failed and all(t.instance_id == "hier.1" for t in failed)
    # work still queued in the agent moves to the survivors
    assert all(t.state is TaskState.DONE for t in res.pilot.registry.values() if t.instance_id != "hier.1")
    assert not any(e.ts > 30.0 and e.backend == "hier.1" and e.state is TaskState.RUNNING for e in res.events)
