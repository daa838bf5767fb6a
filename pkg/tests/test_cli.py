"""Tests for the ipod-assim command line: dry-run, run, summarize and sweep."""
from __future__ import annotations

import json
import os
import subprocess
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from ipod_assimilation import experiments
from ipod_assimilation.artifacts import read_rows_csv
from ipod_assimilation.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_INVARIANT, EXIT_OK, main
from ipod_assimilation.config import load_config
from ipod_assimilation.errors import ArtifactError, InvariantFailure, describe_exception, provenance_of

PACKAGE_ROOT = Path(__file__).resolve().parents[1]

TINY_LINEAR = textwrap.dedent(
    """\
    name: tiny
    kind: linear-assimilation
    seed: 4
    problem:
      h: 0.25
      tau: 0.1
      T: 0.5
    descent:
      gamma: 0.01
      kappa: 10.0
      tol_sd: 1.0e-4
      max_iters: 300
      mode: both
    compression:
      tol_p: 0.0
      tol_sv: 0.0
    """
)

TINY_BENCH = textwrap.dedent(
    """\
    name: bench
    kind: ipod-bench
    bench:
      m: 20
      n: 15
      rank: 3
      n_streams: 2
      tolerances: [1.0e-8, 1.0e-6]
    """
)

TINY_SUITE = textwrap.dedent(
    """\
    name: suite
    kind: convergence-suite
    seed: 2
    suite:
      n_instances: 6
      k: 40
    """
)


def _write(tmp_path: Path, text: str, name: str = "cfg.yaml") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _planned_paths(stdout: str) -> list[Path]:
    planned: list[Path] = []
    for raw in stdout.splitlines():
        line = raw.strip()
        if line.startswith("{"):
            msg = json.loads(line).get("msg", "")
            planned += [Path(m.strip()[1:].strip()) for m in msg.splitlines() if m.strip().startswith("-")]
        elif line.startswith("-"):
            planned.append(Path(line[1:].strip()))
    return planned


@pytest.mark.parametrize("log_format", ["text", "json"])
def test_dry_run_plans_without_writing(tmp_path, log_format):
    cfg = _write(tmp_path, TINY_LINEAR)
    out = tmp_path / "out"
    env = os.environ.copy()
    env["IPODA_LOG_FORMAT"] = log_format
    env["IPODA_OUTPUT_ROOT"] = str(out)
    result = subprocess.run(
        [sys.executable, "-m", "ipod_assimilation", "run", str(cfg), "--dry-run"],
        cwd=str(PACKAGE_ROOT),
        env={**env, "PYTHONPATH": str(PACKAGE_ROOT / "src")},
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert result.returncode == 0, result.stdout + result.stderr
    planned = _planned_paths(result.stdout)
    names = {p.name for p in planned}
    assert {"iterations_exact.csv", "iterations_inexact.csv", "ledger_inexact.csv", "summary.json"} <= names
    for p in planned:
        assert p.parent == out / "tiny"
        assert not p.exists(), f"Dry-run should not create file: {p}"
    assert not out.exists()
    if log_format == "json":
        assert result.stdout.strip().splitlines()[0].startswith("{")
    else:
        assert "INFO" in result.stdout


def test_dry_run_in_process_rejects_bad_config(tmp_path):
    cfg = _write(tmp_path, TINY_LINEAR.replace("h: 0.25", "h: 0.3"))
    assert main(["run", str(cfg), "--dry-run"]) == EXIT_CONFIG


def test_run_linear_both_modes(tmp_path, capsys):
    cfg = _write(tmp_path, TINY_LINEAR)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "out")]) == EXIT_OK
    run_dir = tmp_path / "out" / "tiny"
    for path in experiments.planned_artifacts(load_config(cfg), run_dir):
        assert path.is_file(), path
    assert (run_dir / "config.yaml").is_file()

    summary = json.loads((run_dir / "summary.json").read_text())
    modes = summary["modes"]
    assert modes["exact"]["iterations"] == modes["inexact"]["iterations"]
    assert modes["exact"]["peak_snapshots"] == summary["n_steps"]
    assert modes["inexact"]["peak_snapshots"] == 1
    assert modes["exact"]["storage"] == [summary["dim"], summary["n_steps"]]
    assert modes["inexact"]["relative_error"] == pytest.approx(modes["exact"]["relative_error"], rel=1e-6)

    table = capsys.readouterr().out
    assert "number of iteration" in table
    assert "data storage" in table
    assert "relative error" in table

    assert main(["summarize", str(run_dir)]) == EXIT_OK
    assert capsys.readouterr().out == table


def test_runs_are_reproducible(tmp_path, monkeypatch):
    cfg = _write(tmp_path, TINY_LINEAR)
    monkeypatch.setenv("IPODA_OUTPUT_ROOT", str(tmp_path / "a"))
    assert main(["run", str(cfg)]) == EXIT_OK
    monkeypatch.setenv("IPODA_OUTPUT_ROOT", str(tmp_path / "b"))
    assert main(["run", str(cfg)]) == EXIT_OK
    for name in ("iterations_exact.csv", "iterations_inexact.csv", "ledger_inexact.csv", "summary.json"):
        assert (tmp_path / "a" / "tiny" / name).read_bytes() == (tmp_path / "b" / "tiny" / name).read_bytes()


def test_summarize_missing_run_dir(tmp_path):
    assert main(["summarize", str(tmp_path / "absent")]) == EXIT_ERROR
    (tmp_path / "empty").mkdir()
    assert main(["summarize", str(tmp_path / "empty")]) == EXIT_ERROR


def test_emit_summary_rejects_runs_without_modes(tmp_path):
    (tmp_path / "summary.json").write_text(json.dumps({"kind": "linear-assimilation", "name": "x", "modes": {}}))
    with pytest.raises(ArtifactError):
        experiments.emit_summary(tmp_path)


def test_format_summary_is_deterministic():
    summary = {
        "kind": "linear-assimilation",
        "name": "demo",
        "modes": {
            "inexact": {"iterations": 12, "storage": [861, 9], "relative_error": 0.0123456789},
            "exact": {"iterations": 12, "storage": [861, 200], "relative_error": 0.0123456781},
        },
    }
    text = experiments.format_summary(summary)
    lines = text.splitlines()
    assert lines[0] == "demo (linear-assimilation)"
    assert lines[1].split() == ["exact", "inexact"]
    assert lines[2].split() == ["number", "of", "iteration", "12", "12"]
    assert lines[3].split() == ["data", "storage", "861x200", "861x9"]
    assert lines[4].split() == ["relative", "error", "0.0123457", "0.0123457"]
    assert experiments.format_summary(dict(reversed(list(summary.items())))) == text


def test_invariant_failure_exit_code(tmp_path, monkeypatch):
    def broken(cfg, run_dir):
        raise InvariantFailure("ledger bound exceeded", provenance="test")

    monkeypatch.setitem(experiments.DRIVERS, "ipod-bench", broken)
    cfg = _write(tmp_path, TINY_BENCH)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_INVARIANT


def test_missing_config_exit_code(tmp_path):
    assert main(["run", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_ipod_bench_run(tmp_path, capsys):
    cfg = _write(tmp_path, TINY_BENCH)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "bench" / "summary.json").read_text())
    assert summary["streams"] == 4
    assert all(ratio >= 1.0 - 1e-5 for ratio in summary["median_ratio"].values())
    rows = read_rows_csv(tmp_path / "bench" / "ledger_bench.csv")
    assert list(rows[0]) == experiments.BENCH_FIELDS
    assert len(rows) == 4
    assert all(float(r["exact_error"]) <= float(r["error_bound"]) * (1 + 1e-9) + 1e-13 for r in rows)
    assert "streams" in capsys.readouterr().out


def test_convergence_suite_run(tmp_path):
    cfg = _write(tmp_path, TINY_SUITE)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "suite" / "summary.json").read_text())
    assert summary["instances"] == 6
    assert summary["bound_violations"] == 0
    assert (tmp_path / "suite" / "suite.csv").is_file()


def test_sweep_over_parameter_values(tmp_path):
    cfg = _write(tmp_path, TINY_BENCH)
    code = main(["sweep", str(cfg), "--param", "bench.rank=2,4", "--workers", "2", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    for rank in (2, 4):
        run_dir = tmp_path / "bench" / f"bench-bench.rank={rank}"
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["name"] == f"bench-bench.rank={rank}"
        assert (run_dir / "config.yaml").is_file()


def test_sweep_rejects_bad_override(tmp_path):
    cfg = _write(tmp_path, TINY_BENCH)
    assert main(["sweep", str(cfg), "--param", "bench.rank=-1", "--output-dir", str(tmp_path)]) == EXIT_CONFIG


def _failing_driver(cfg, run_dir):
    raise np.linalg.LinAlgError("SVD did not converge")


def test_unexpected_error_in_run_exits_with_error(tmp_path, monkeypatch):
    monkeypatch.setitem(experiments.DRIVERS, "ipod-bench", _failing_driver)
    cfg = _write(tmp_path, TINY_BENCH)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_ERROR
    assert not (tmp_path / "bench" / "summary.json").exists()


def test_unexpected_error_names_the_module(tmp_path, monkeypatch):
    monkeypatch.setitem(experiments.DRIVERS, "ipod-bench", _failing_driver)
    with pytest.raises(np.linalg.LinAlgError) as info:
        experiments.execute(load_config(_write(tmp_path, TINY_BENCH)), tmp_path / "run")
    assert provenance_of(info.value) == "experiments"
    assert describe_exception(info.value) == "[experiments] LinAlgError: SVD did not converge"
    assert describe_exception(InvariantFailure("bound", provenance="ipod_core")) == "[ipod_core] bound"


def test_unexpected_error_in_one_sweep_run_keeps_the_others(tmp_path, monkeypatch):
    real = experiments.DRIVERS["ipod-bench"]

    def flaky(cfg, run_dir):
        if cfg.section("bench").rank == 4:
            raise MemoryError("out of memory")
        return real(cfg, run_dir)

    monkeypatch.setitem(experiments.DRIVERS, "ipod-bench", flaky)
    cfg = _write(tmp_path, TINY_BENCH)
    code = main(["sweep", str(cfg), "--param", "bench.rank=2,4", "--workers", "2", "--output-dir", str(tmp_path)])
    assert code == EXIT_ERROR
    assert (tmp_path / "bench" / "bench-bench.rank=2" / "summary.json").is_file()
    assert not (tmp_path / "bench" / "bench-bench.rank=4" / "summary.json").exists()


def test_summarize_unreadable_summary_exits_with_error(tmp_path):
    (tmp_path / "summary.json").write_bytes(b"\xff\xfe not json")
    assert main(["summarize", str(tmp_path)]) == EXIT_ERROR


def test_ledger_check_scales_with_stream_norm(tmp_path, monkeypatch):
    real = experiments.bench_stream
    monkeypatch.setattr(experiments, "bench_stream", lambda *args: 1e8 * real(*args))
    cfg = _write(tmp_path, TINY_BENCH)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_OK
    rows = read_rows_csv(tmp_path / "bench" / "ledger_bench.csv")
    assert len(rows) == 4
