import subprocess
import sys

import pytest

from pilotrt.cli import EXIT_CONFIG, EXIT_INVALID, EXIT_OK, main, parse_alloc


@pytest.fixture(scope="module")
def a1_log(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["run", "srun_4n", "--out", str(out)]) == EXIT_OK
    return out / "srun_4n" / "events.tsv"


def test_run_writes_under_out(a1_log, capsys):
    assert a1_log.exists()


def test_validate_a1_log(a1_log, capsys):
    assert main(["validate", str(a1_log)]) == EXIT_OK
    assert "legal" in capsys.readouterr().out


def test_metrics_a1_log(a1_log, capsys):
    assert main(["metrics", str(a1_log), "4x56x8"]) == EXIT_OK
    rows = dict(line.split("\t", 1) for line in capsys.readouterr().out.splitlines())
    assert float(rows["utilization_pct"]) == pytest.approx(50.0)
    assert float(rows["makespan_s"]) == pytest.approx(1440.0)


def test_metrics_illegal_two_event_log(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("#pilotrt-events v1\n0.0\tt\tNEW\t-\t-\t-\n1.0\tt\tDONE\t-\t-\t-\n")
    assert main(["metrics", str(bad), "1x4"]) == EXIT_INVALID
    out = capsys.readouterr().out
    assert "violation" in out and "t" in out


def test_validate_garbage_file(tmp_path):
    bad = tmp_path / "junk.tsv"
    bad.write_text("not a log\n")
    assert main(["validate", str(bad)]) == EXIT_INVALID


@pytest.mark.parametrize("argv", [
    ["run", "no_such_preset"],
    ["run", "srun_4n", "--set", "partitions.capped=0"],
    ["run", "srun_4n", "--mode", "real", "--set", "allocation.nodes=4"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_alloc_exit_2(a1_log):
    assert main(["metrics", str(a1_log), "four"]) == EXIT_CONFIG


def test_presets_list(capsys):
    assert main(["presets", "list"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    rows = [ln for ln in lines if "experiment:" in ln]
    assert len(rows) == 7 and len(lines) == 8


def test_repetitions_use_distinct_dirs(tmp_path, capsys):
    assert main(["run", "flux1_4n", "--out", str(tmp_path), "--set", "experiment.repetitions=2",
                 "--set", "workload.count=20"]) == EXIT_OK
    assert {p.name for p in (tmp_path / "flux1_4n").iterdir()} == {"rep_0", "rep_1"}
    assert capsys.readouterr().out.count("complete") == 2


def test_parse_alloc():
    a = parse_alloc("2x8x1")
    assert (a.node_count, a.total_cores, a.total_gpus) == (2, 16, 2)
    assert parse_alloc("3x4").total_gpus == 0


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "pilotrt.cli", "presets", "list"], capture_output=True, text=True)
    assert r.returncode == 0 and "srun_4n" in r.stdout
