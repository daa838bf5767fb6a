"""Initial-condition recovery by steepest descent with exact or compressed adjoint gradients.

The objective is

    J(u0) = tau/2 * sum_{j=1..n} ||obs^j - u^j||_M^2 + gamma/2 * ||u0||_M^2

and its M-gradient is ``-u*^0 + gamma * u0`` where the adjoint sweep runs from
u*^n = 0 down to u*^0. In inexact mode the forward trajectory is streamed
through the incremental POD (scaled by sqrt(tau)) and decompressed snapshot by
snapshot during the backward sweep, so at most one full snapshot is alive.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import scipy.sparse as sp

from .artifacts import write_json_summary, write_rows_csv
from .errors import ContractViolation, DivergenceError
from .ipod_core import (
    IpodState,
    IpodTolerances,
    error_bound,
    ipod_finalize,
    ipod_init,
    ipod_update,
    reconstruct,
)
from .pde_constraints import ObservationSet, Trajectory
from .weighted_space import WeightOperator, weighted_norm

logger = logging.getLogger("ipod-assim.assimilation")

TERMINATION_MODES = ("grad-norm", "objective-decrement")
ITERATION_FIELDS = ["iter", "J", "grad_norm", "e_p", "e_sv", "rank", "xi_norm", "peak_snapshots"]


class AssimilationProblem(Protocol):
    n_steps: int
    tau: float
    mass: sp.csr_matrix

    @property
    def dim(self) -> int: ...

    @property
    def mass_weight(self) -> WeightOperator: ...

    def weight(self, choice: str) -> WeightOperator: ...

    def forward_step(self, u_prev: np.ndarray, j: int) -> np.ndarray: ...

    def adjoint_step(self, ustar_next: np.ndarray, u_next: np.ndarray, obs_next: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AssimilationConfig:
    gamma: float = 1.0 / 2000.0
    kappa: float = 1.0
    tol_sd: float = 1e-5
    termination_mode: str = "grad-norm"
    max_iters: int = 5000
    compression: IpodTolerances | None = None
    weight_choice: str = "L2-mass"
    reference_gradient: bool = False
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ContractViolation(f"gamma must be >= 0, got {self.gamma}", provenance="assimilation")
        if not self.kappa > 0:
            raise ContractViolation(f"kappa must be > 0, got {self.kappa}", provenance="assimilation")
        if not self.tol_sd > 0:
            raise ContractViolation(f"tol_sd must be > 0, got {self.tol_sd}", provenance="assimilation")
        if self.termination_mode not in TERMINATION_MODES:
            raise ContractViolation(
                f"termination_mode must be one of {TERMINATION_MODES}, got {self.termination_mode!r}", provenance="assimilation"
            )
        if self.max_iters < 1:
            raise ContractViolation(f"max_iters must be >= 1, got {self.max_iters}", provenance="assimilation")


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    J: float
    grad_norm: float
    e_p: float = 0.0
    e_sv: float = 0.0
    rank: int = 0
    xi_norm: float | None = None
    peak_snapshots: int = 0
    wall_time: float = 0.0

    @property
    def error_bound(self) -> float:
        return self.e_p + self.e_sv


class SnapshotCounter:
    """Counts full-length snapshot vectors held at once."""

    def __init__(self) -> None:
        self.held = 0
        self.peak = 0

    def hold(self, n: int = 1) -> None:
        self.held += n
        self.peak = max(self.peak, self.held)

    def release(self, n: int = 1) -> None:
        if n > self.held:
            raise ContractViolation(f"releasing {n} snapshot(s) but only {self.held} held", provenance="assimilation")
        self.held -= n

    def reset(self) -> None:
        self.held = 0
        self.peak = 0


def _misfit(problem: AssimilationProblem, obs_j: np.ndarray, u_j: np.ndarray) -> float:
    r = obs_j - u_j
    return float(r @ (problem.mass @ r))


def _check_inputs(u0: np.ndarray, obs: ObservationSet, problem: AssimilationProblem) -> np.ndarray:
    u = np.asarray(u0, dtype=float)
    if u.shape != (problem.dim,):
        raise ContractViolation(f"u0 has shape {u.shape}, expected ({problem.dim},)", provenance="assimilation")
    if obs.values.shape != (problem.n_steps, problem.dim):
        raise ContractViolation(
            f"observations have shape {obs.values.shape}, expected ({problem.n_steps}, {problem.dim})", provenance="assimilation"
        )
    return u


def objective(u0: np.ndarray, obs: ObservationSet, problem: AssimilationProblem, gamma: float) -> float:
    u = _check_inputs(u0, obs, problem)
    total = 0.0
    state = u
    for j in range(problem.n_steps):
        state = problem.forward_step(state, j)
        total += _misfit(problem, obs[j + 1], state)
    return 0.5 * problem.tau * total + 0.5 * gamma * float(u @ (problem.mass @ u))


def objective_from_trajectory(u0: np.ndarray, traj: Trajectory, obs: ObservationSet, problem: AssimilationProblem, gamma: float) -> float:
    misfit = sum(_misfit(problem, obs[j], traj[j]) for j in range(1, traj.n_steps + 1))
    return 0.5 * problem.tau * misfit + 0.5 * gamma * float(u0 @ (problem.mass @ u0))


def gradient_exact(
    u0: np.ndarray,
    obs: ObservationSet,
    problem: AssimilationProblem,
    gamma: float,
    counter: SnapshotCounter | None = None,
) -> tuple[np.ndarray, Trajectory]:
    """Full-storage adjoint gradient; returns it with the retained forward trajectory."""
    u = _check_inputs(u0, obs, problem)
    kept: list[np.ndarray] = []
    state = u
    for j in range(problem.n_steps):
        state = problem.forward_step(state, j)
        kept.append(state)
        if counter is not None:
            counter.hold()
    traj = Trajectory(snapshots=np.vstack(kept), tau=problem.tau)

    ustar = np.zeros(problem.dim)
    for j in range(problem.n_steps, 0, -1):
        ustar = problem.adjoint_step(ustar, traj[j], obs[j])
    if counter is not None:
        counter.release(problem.n_steps)
    return -ustar + gamma * u, traj


class _StreamCompressor:
    """Feeds sqrt(tau)-scaled snapshots to the incremental POD.

    Leading zero snapshots (before the stream can be normalized) are counted
    and decompress to zero.
    """

    def __init__(self, weight: WeightOperator, tols: IpodTolerances, tau: float) -> None:
        self.weight = weight
        self.tols = tols
        self.tau = tau
        self.state: IpodState | None = None
        self.leading_zeros = 0

    def push(self, u: np.ndarray) -> None:
        s = np.sqrt(self.tau) * u
        if self.state is None:
            if not np.any(s):
                self.leading_zeros += 1
                return
            self.state = ipod_init(s, self.weight, self.tols)
        else:
            ipod_update(self.state, s)

    def finalize(self) -> None:
        if self.state is not None:
            ipod_finalize(self.state)

    def snapshot(self, j: int) -> np.ndarray:
        if self.state is None or j <= self.leading_zeros:
            return np.zeros(self.weight.dim)
        return reconstruct(self.state, j - self.leading_zeros, self.tau)

    def ledger(self) -> tuple[float, float, int]:
        if self.state is None:
            return 0.0, 0.0, 0
        return self.state.e_p, self.state.e_sv, self.state.rank


def gradient_compressed(
    u0: np.ndarray,
    obs: ObservationSet,
    problem: AssimilationProblem,
    gamma: float,
    tols: IpodTolerances,
    weight_choice: str = "L2-mass",
    counter: SnapshotCounter | None = None,
    *,
    reference: bool = False,
    iteration: int = 0,
) -> tuple[np.ndarray, IpodState | None, IterationRecord]:
    """Inexact gradient from a compressed forward trajectory.

    The returned state is ``None`` only when every forward snapshot was zero.
    With ``reference=True`` the exact gradient is computed on the side to report
    the gradient error norm; that path stores the full trajectory.
    """
    t0 = time.perf_counter()
    u = _check_inputs(u0, obs, problem)
    counter = counter if counter is not None else SnapshotCounter()
    comp = _StreamCompressor(problem.weight(weight_choice), tols, problem.tau)

    misfit = 0.0
    state = u
    for j in range(problem.n_steps):
        state = problem.forward_step(state, j)
        counter.hold()
        misfit += _misfit(problem, obs[j + 1], state)
        comp.push(state)
        counter.release()
    comp.finalize()
    J = 0.5 * problem.tau * misfit + 0.5 * gamma * float(u @ (problem.mass @ u))

    ustar = np.zeros(problem.dim)
    for j in range(problem.n_steps, 0, -1):
        uj = comp.snapshot(j)
        counter.hold()
        ustar = problem.adjoint_step(ustar, uj, obs[j])
        counter.release()
    g = -ustar + gamma * u

    xi = None
    if reference:
        g_ref, _ = gradient_exact(u, obs, problem, gamma)
        xi = weighted_norm(g - g_ref, problem.mass_weight)
    e_p, e_sv, rank = comp.ledger()
    record = IterationRecord(
        iter=iteration,
        J=J,
        grad_norm=weighted_norm(g, problem.mass_weight),
        e_p=e_p,
        e_sv=e_sv,
        rank=rank,
        xi_norm=xi,
        peak_snapshots=counter.peak,
        wall_time=time.perf_counter() - t0,
    )
    return g, comp.state, record


@dataclass
class DescentResult:
    mode: str
    u0: np.ndarray
    records: list[IterationRecord] = field(default_factory=list)
    terminated: bool = False
    peak_snapshots: int = 0
    final_state: IpodState | None = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_rank(self) -> int:
        return self.records[-1].rank if self.records else 0


def run_descent(
    config: AssimilationConfig,
    problem: AssimilationProblem,
    obs: ObservationSet,
    u0_initial: np.ndarray,
    mode: str = "exact",
    counter: SnapshotCounter | None = None,
    on_iteration: Callable[[IterationRecord, np.ndarray, np.ndarray], None] | None = None,
) -> DescentResult:
    """Constant-step steepest descent u <- u - kappa * grad J(u).

    grad-norm mode stops once kappa * ||grad J|| <= tol_sd for the gradient just
    used; objective-decrement mode stops once |J(i) - J(i-1)| <= tol_sd.
    ``on_iteration(record, u, g)`` is called before each update.
    """
    if mode not in ("exact", "inexact"):
        raise ContractViolation(f"mode must be 'exact' or 'inexact', got {mode!r}", provenance="assimilation")
    if mode == "inexact" and config.compression is None:
        raise ContractViolation("inexact mode needs compression tolerances", provenance="assimilation")
    counter = counter if counter is not None else SnapshotCounter()
    u = _check_inputs(u0_initial, obs, problem).copy()
    result = DescentResult(mode=mode, u0=u)
    mass_wt = problem.mass_weight
    J_prev: float | None = None

    for i in range(config.max_iters):
        t0 = time.perf_counter()
        if mode == "exact":
            g, traj = gradient_exact(u, obs, problem, config.gamma, counter)
            J = objective_from_trajectory(u, traj, obs, problem, config.gamma)
            record = IterationRecord(
                iter=i, J=J, grad_norm=weighted_norm(g, mass_wt), peak_snapshots=counter.peak,
                wall_time=time.perf_counter() - t0,
            )
        else:
            assert config.compression is not None
            g, state, record = gradient_compressed(
                u, obs, problem, config.gamma, config.compression, config.weight_choice, counter,
                reference=config.reference_gradient, iteration=i,
            )
            result.final_state = state

        if not (np.isfinite(record.J) and np.all(np.isfinite(g))):
            result.u0 = u
            raise DivergenceError(f"non-finite objective or gradient at iteration {i}", trace=result, provenance="assimilation")
        result.records.append(record)
        if i % config.log_every == 0:
            logger.info(
                "iter %d (%s): J=%.6e |grad|=%.3e rank=%d bound=%.3e", i, mode, record.J, record.grad_norm, record.rank,
                record.error_bound,
            )
        if on_iteration is not None:
            on_iteration(record, u, g)

        if config.termination_mode == "objective-decrement" and J_prev is not None and abs(record.J - J_prev) <= config.tol_sd:
            result.terminated = True
            break
        J_prev = record.J
        u = u - config.kappa * g
        if config.termination_mode == "grad-norm" and config.kappa * record.grad_norm <= config.tol_sd:
            result.terminated = True
            break

    result.u0 = u
    result.peak_snapshots = counter.peak
    logger.info(
        "Descent (%s) %s after %d iteration(s); peak snapshots held: %d",
        mode, "converged" if result.terminated else "stopped at max_iters", result.iterations, counter.peak,
    )
    return result


# ---- Diagnostics ----
def hessian_vector(
    u0: np.ndarray, v: np.ndarray, obs: ObservationSet, problem: AssimilationProblem, gamma: float
) -> np.ndarray:
    """H v = grad J(u0 + v) - grad J(u0); exact for the linear-quadratic problem."""
    g_plus, _ = gradient_exact(u0 + v, obs, problem, gamma)
    g_base, _ = gradient_exact(u0, obs, problem, gamma)
    return g_plus - g_base


def estimate_descent_constant(
    problem: AssimilationProblem, obs: ObservationSet, gamma: float, *, iters: int = 40, seed: int = 0
) -> float:
    """Power iteration on the Hessian in the M inner product; returns ||H v||_M for the final unit v."""
    rng = np.random.default_rng(seed)
    wt = problem.mass_weight
    base = np.zeros(problem.dim)
    g_base, _ = gradient_exact(base, obs, problem, gamma)
    v = rng.standard_normal(problem.dim)
    v /= weighted_norm(v, wt)
    estimate = 0.0
    for _ in range(iters):
        g_v, _ = gradient_exact(v, obs, problem, gamma)
        Hv = g_v - g_base
        estimate = weighted_norm(Hv, wt)
        if estimate == 0.0:
            break
        v = Hv / estimate
    logger.debug("Estimated descent constant L=%.6e after %d power iteration(s)", estimate, iters)
    return estimate


def relative_trajectory_error(truth: Trajectory, estimate: Trajectory, mass: sp.spmatrix, tau: float) -> float:
    """sqrt(sum_j tau * ||u^j - u*^j||_M^2 / ||u^j||_M^2), u^j from ``truth``."""
    if truth.snapshots.shape != estimate.snapshots.shape:
        raise ContractViolation(
            f"trajectory shapes differ: {truth.snapshots.shape} vs {estimate.snapshots.shape}", provenance="assimilation"
        )
    total = 0.0
    for j in range(1, truth.n_steps + 1):
        ref = truth[j]
        den = float(ref @ (mass @ ref))
        if den == 0.0:
            raise ContractViolation(f"truth snapshot {j} is zero", provenance="assimilation")
        diff = ref - estimate[j]
        total += tau * float(diff @ (mass @ diff)) / den
    return float(np.sqrt(total))


# ---- Artifacts ----
def write_iterations_csv(records: list[IterationRecord], out_path: str | Path) -> None:
    rows = [{k: v for k, v in asdict(r).items() if k in ITERATION_FIELDS} for r in records]
    write_rows_csv(rows, ITERATION_FIELDS, out_path, label="iteration CSV")


def save_result(result: DescentResult, out_path: str | Path, *, extra: dict | None = None) -> None:
    """Final-state binary (``.npz``) plus a JSON sidecar with the run accounting."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as fh:
        np.savez(fh, u0=result.u0, iterations=np.array(result.iterations), peak_snapshots=np.array(result.peak_snapshots))
    logger.info("Wrote final state: %s", out)
    summary = {
        "mode": result.mode,
        "iterations": result.iterations,
        "terminated": result.terminated,
        "peak_snapshots": result.peak_snapshots,
        "final_rank": result.final_rank,
        "final_J": result.records[-1].J if result.records else None,
    }
    if extra:
        summary.update(extra)
    write_json_summary(summary, out.with_suffix(".json"))
