"""Experiment drivers behind ``ipod-assim run``.

Each driver takes a validated ``ExperimentConfig`` and a run directory, writes
its artifacts there and returns the machine-readable summary (also written as
``summary.json``). Runtime invariants that fail raise ``InvariantFailure``.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .artifacts import read_json_summary, write_json_summary, write_rows_csv
from .assimilation import (
    AssimilationConfig,
    DescentResult,
    SnapshotCounter,
    relative_trajectory_error,
    run_descent,
    save_result,
    write_iterations_csv,
)
from .config import ExperimentConfig
from .convergence_lab import run_suite, write_suite_csv
from .errors import ArtifactError, InvariantFailure
from .ipod_core import IpodTolerances, error_bound, ipod_compress, reconstruction_error
from .pde_constraints import (
    assemble_burgers_problem,
    assemble_interface_problem,
    assemble_p1_1d,
    burgers_truth_initial_condition,
    solve_forward,
    synth_observations,
    truth_initial_condition,
)
from .weighted_space import WeightOperator, hs_norm_sq

logger = logging.getLogger("ipod-assim.experiments")

SUMMARY_FILE = "summary.json"
LEDGER_FIELDS = ["iter", "e_p", "e_sv", "error_bound", "rank"]
BENCH_FIELDS = ["tol", "stream", "rank", "e_p", "e_sv", "error_bound", "exact_error", "ratio"]
# roundoff allowance on the ledger check, relative to |U|_HS
LEDGER_SLACK = 1e-13


def planned_artifacts(cfg: ExperimentConfig, run_dir: Path) -> list[Path]:
    """Files a run of ``cfg`` will write (used by --dry-run)."""
    paths: list[Path] = []
    if cfg.kind.endswith("assimilation"):
        mode = cfg.section("descent").mode
        modes = ["exact", "inexact"] if mode == "both" else [mode]
        for m in modes:
            paths += [run_dir / f"iterations_{m}.csv", run_dir / f"result_{m}.npz", run_dir / f"result_{m}.json"]
            if m == "inexact":
                paths.append(run_dir / "ledger_inexact.csv")
    elif cfg.kind == "convergence-suite":
        paths.append(run_dir / "suite.csv")
    else:
        paths.append(run_dir / "ledger_bench.csv")
    paths.append(run_dir / SUMMARY_FILE)
    return paths


def _descent_config(cfg: ExperimentConfig) -> AssimilationConfig:
    d = cfg.section("descent")
    comp = cfg.compression
    return AssimilationConfig(
        gamma=d.gamma,
        kappa=d.kappa,
        tol_sd=d.tol_sd,
        termination_mode=d.termination_mode,
        max_iters=d.max_iters,
        compression=comp.tolerances() if comp is not None else None,
        weight_choice=comp.weight if comp is not None else "L2-mass",
        reference_gradient=d.reference_gradient,
        log_every=d.log_every,
    )


def _check_memory_contract(result: DescentResult, n_steps: int) -> None:
    expected = 1 if result.mode == "inexact" else n_steps
    if result.peak_snapshots != expected:
        raise InvariantFailure(
            f"{result.mode} run held {result.peak_snapshots} snapshot(s) at peak, expected {expected}", provenance="experiments"
        )


def _run_assimilation(cfg: ExperimentConfig, run_dir: Path, problem: Any, u0_truth: np.ndarray, noise_sigma: float) -> dict[str, Any]:
    truth = solve_forward(problem, u0_truth)
    assert truth is not None
    obs = synth_observations(truth, noise_sigma, cfg.seed)
    acfg = _descent_config(cfg)
    mode = cfg.section("descent").mode
    modes = ["exact", "inexact"] if mode == "both" else [mode]

    results: dict[str, Any] = {}
    for m in modes:
        counter = SnapshotCounter()
        result = run_descent(acfg, problem, obs, np.zeros(problem.dim), m, counter)
        _check_memory_contract(result, problem.n_steps)
        estimate = solve_forward(problem, result.u0)
        assert estimate is not None
        rel = relative_trajectory_error(truth, estimate, problem.mass, problem.tau)
        stored = result.final_rank if m == "inexact" else problem.n_steps

        write_iterations_csv(result.records, run_dir / f"iterations_{m}.csv")
        if m == "inexact":
            rows = [
                {"iter": r.iter, "e_p": r.e_p, "e_sv": r.e_sv, "error_bound": r.error_bound, "rank": r.rank}
                for r in result.records
            ]
            write_rows_csv(rows, LEDGER_FIELDS, run_dir / "ledger_inexact.csv", label="ledger CSV")
            xi = [r.xi_norm for r in result.records if r.xi_norm is not None]
            if xi and not all(math.isfinite(v) for v in xi):
                raise InvariantFailure("non-finite gradient error norm recorded", provenance="experiments")
        entry = {
            "iterations": result.iterations,
            "terminated": result.terminated,
            "storage": [problem.dim, stored],
            "relative_error": rel,
            "peak_snapshots": result.peak_snapshots,
            "final_J": result.records[-1].J,
        }
        save_result(result, run_dir / f"result_{m}.npz", extra={"relative_error": rel})
        results[m] = entry

    if len(modes) == 2 and acfg.compression is not None:
        t = acfg.compression
        if t.tol_p == 0 and t.tol_sv == 0 and results["exact"]["iterations"] != results["inexact"]["iterations"]:
            raise InvariantFailure(
                "lossless compression changed the iteration count "
                f"({results['exact']['iterations']} exact vs {results['inexact']['iterations']} inexact)",
                provenance="experiments",
            )
    return {"modes": results, "n_steps": problem.n_steps, "dim": problem.dim}


def run_linear(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Any]:
    p = cfg.section("problem")
    problem = assemble_interface_problem(p.h, p.tau, p.T, p.beta_plus, p.beta_minus, p.forcing)
    return _run_assimilation(cfg, run_dir, problem, truth_initial_condition(problem.mesh), p.noise_sigma)


def run_burgers(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Any]:
    b = cfg.section("burgers")
    problem = assemble_burgers_problem(b.n_cells, b.tau, b.T, b.nu)
    return _run_assimilation(cfg, run_dir, problem, burgers_truth_initial_condition(problem), b.noise_sigma)


def run_convergence_suite(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Any]:
    s = cfg.section("suite")
    rows = run_suite(s.n_instances, cfg.seed, k=s.k, workers=s.workers)
    write_suite_csv(rows, run_dir / "suite.csv")
    violations = sum(r["bound_violations"] for r in rows)
    lemma = sum(r["lemma_violations"] for r in rows)
    eligible = sum(r["decrease_eligible"] for r in rows)
    failed = sum(r["decrease_failures"] for r in rows)
    summary = {
        "instances": len(rows),
        "bound_violations": violations,
        "lemma_violations": lemma,
        "decrease_eligible": eligible,
        "decrease_failures": failed,
    }
    if violations or lemma or failed:
        write_json_summary({"kind": cfg.kind, "name": cfg.name, **summary}, run_dir / SUMMARY_FILE)
        raise InvariantFailure(
            f"convergence suite: {violations} bound violation(s), {lemma} gradient-bound violation(s), {failed} failed decrease(s)",
            provenance="experiments",
        )
    return summary


def bench_stream(rng: np.random.Generator, m: int, n: int, rank: int, noise: float) -> np.ndarray:
    """Low-rank-plus-noise snapshot matrix (m x n) with decaying spectrum."""
    left = np.linalg.qr(rng.standard_normal((m, rank)))[0]
    right = np.linalg.qr(rng.standard_normal((n, rank)))[0]
    spectrum = 10.0 ** (-np.arange(rank) / max(rank - 1, 1) * 3.0)
    return (left * spectrum) @ right.T + noise * rng.standard_normal((m, n))


def run_ipod_bench(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Any]:
    b = cfg.section("bench")
    if b.weight == "mass":
        mass, _ = assemble_p1_1d(b.m + 1)
        wt = WeightOperator.from_matrix(mass[1:-1, 1:-1])
    else:
        wt = WeightOperator.identity(b.m)
    rows: list[dict[str, Any]] = []
    ratios: dict[str, list[float]] = {}
    for tol in b.tolerances:
        for s in range(b.n_streams):
            U = bench_stream(np.random.default_rng([cfg.seed, s]), wt.dim, b.n, b.rank, b.noise)
            state = ipod_compress(U.T, wt, IpodTolerances.uniform(tol))
            bound = error_bound(state)
            exact = reconstruction_error(state, U)
            if exact > bound * (1.0 + 1e-9) + LEDGER_SLACK * math.sqrt(hs_norm_sq(U, wt)):
                raise InvariantFailure(f"exact error {exact:.3e} exceeds ledger bound {bound:.3e} (tol={tol:g})", provenance="experiments")
            ratio = bound / exact if exact > 0 else math.nan
            if exact > 0:
                ratios.setdefault(f"{tol:g}", []).append(ratio)
            rows.append({
                "tol": tol, "stream": s, "rank": state.rank, "e_p": state.e_p, "e_sv": state.e_sv,
                "error_bound": bound, "exact_error": exact, "ratio": ratio,
            })
    write_rows_csv(rows, BENCH_FIELDS, run_dir / "ledger_bench.csv", label="ledger CSV")
    return {"streams": len(rows), "median_ratio": {k: float(np.median(v)) for k, v in sorted(ratios.items())}}


DRIVERS: dict[str, Callable[[ExperimentConfig, Path], dict[str, Any]]] = {
    "linear-assimilation": run_linear,
    "burgers-assimilation": run_burgers,
    "convergence-suite": run_convergence_suite,
    "ipod-bench": run_ipod_bench,
}


def execute(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Any]:
    run_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Running %s experiment %r into %s", cfg.kind, cfg.name, run_dir)
    body = DRIVERS[cfg.kind](cfg, run_dir)
    summary = {"kind": cfg.kind, "name": cfg.name, **body}
    write_json_summary(summary, run_dir / SUMMARY_FILE)
    return summary


# ---- Summary table ----
def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list):
        return "x".join(str(v) for v in value)
    return str(value)


def format_summary(summary: dict[str, Any]) -> str:
    """Deterministic text table; assimilation runs get one column per mode."""
    lines: list[str] = []
    if "modes" in summary:
        modes = [m for m in ("exact", "inexact") if m in summary["modes"]]
        rows = [
            ("number of iteration", [summary["modes"][m]["iterations"] for m in modes]),
            ("data storage", [summary["modes"][m]["storage"] for m in modes]),
            ("relative error", [float(summary["modes"][m]["relative_error"]) for m in modes]),
        ]
        lines.append(f"{'':<22}" + "".join(f"{m:>16}" for m in modes))
        for label, values in rows:
            lines.append(f"{label:<22}" + "".join(f"{_fmt(v):>16}" for v in values))
    else:
        for key in sorted(k for k in summary if k not in ("kind", "name")):
            value = summary[key]
            if isinstance(value, dict):
                for sub in sorted(value):
                    lines.append(f"{key + '[' + sub + ']':<28}{_fmt(value[sub]):>16}")
            else:
                lines.append(f"{key:<28}{_fmt(value):>16}")
    header = f"{summary.get('name', '?')} ({summary.get('kind', '?')})"
    return "\n".join([header, *lines]) + "\n"


def emit_summary(run_dir: str | Path) -> str:
    """Read ``summary.json`` from a run directory and return the formatted table."""
    path = Path(run_dir) / SUMMARY_FILE
    if not Path(run_dir).is_dir():
        raise ArtifactError(f"run directory not found: {run_dir}", provenance="experiments")
    summary = read_json_summary(path)
    if "modes" in summary and not summary["modes"]:
        raise ArtifactError(f"{path} lists no completed runs", provenance="experiments")
    return format_summary(summary)
