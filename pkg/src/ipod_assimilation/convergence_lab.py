"""Gradient descent with bounded gradient errors on objectives with known constants.

Runs x <- x - kappa * (grad J(x) + xi) where ||xi|| <= epsilon is chosen by a
``NoisePolicy``, and checks the resulting traces against the convex, PL and
strongly convex error bounds. Each checker separates "bound violated" from
"hypothesis not satisfied"; only the first is a failure.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .artifacts import write_rows_csv
from .errors import ContractViolation, DivergenceError, DomainError, InvariantFailure

logger = logging.getLogger("ipod-assim.convergence_lab")

FAMILIES = ("strongly-convex-quadratic", "convex-singular-quadratic", "pl-nonconvex")
NOISE_MODES = ("fixed-magnitude-random-direction", "adversarial-opposing", "threshold-fraction")

KAPPA_RTOL = 1e-12
# decreases below this gap are not resolvable in float64
GAP_FLOOR = 1e-18
MARGIN_RTOL = 1e-9
MARGIN_ATOL = 1e-15

SUITE_FIELDS = [
    "instance", "family", "dim", "policy", "kappa", "kappa_L", "epsilon",
    "convex_margin", "convex_hyp_fraction", "pl_margin", "pl_hyp_fraction", "sc_margin", "sc_hyp_fraction",
    "lemma_violations", "decrease_eligible", "decrease_failures",
]


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """J(x) = 1/2 x^T A x - b^T x for the quadratic families, sum(x^2 + 3 sin^2 x) otherwise."""

    family: str
    dim: int
    L: float
    mu: float
    A: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)
    J_star: float = 0.0

    @property
    def is_quadratic(self) -> bool:
        return self.A is not None

    @property
    def is_convex(self) -> bool:
        return self.family != "pl-nonconvex"

    def value(self, x: np.ndarray) -> float:
        if self.A is not None:
            assert self.b is not None
            return float(0.5 * x @ (self.A @ x) - self.b @ x)
        return float(np.sum(x**2 + 3.0 * np.sin(x) ** 2))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.A is not None:
            assert self.b is not None
            return self.A @ x - self.b
        return 2.0 * x + 3.0 * np.sin(2.0 * x)

    def minimizer_near(self, x0: np.ndarray) -> np.ndarray:
        """Minimizer closest to ``x0`` (unique unless A is singular)."""
        if self.A is None:
            return np.zeros(self.dim)
        assert self.b is not None
        lam, Q = np.linalg.eigh(self.A)
        keep = lam > 1e-10 * self.L
        coeff = Q.T @ self.b
        x_p = Q[:, keep] @ (coeff[keep] / lam[keep])
        null = Q[:, ~keep]
        return x_p + null @ (null.T @ x0)

    def gap(self, x: np.ndarray, x_star: np.ndarray) -> float:
        """J(x) - inf J without cancellation."""
        if self.A is not None:
            r = x - x_star
            return float(0.5 * r @ (self.A @ r))
        return float(np.sum(x**2 + 3.0 * np.sin(x) ** 2))


def quadratic_spec(A: np.ndarray, b: np.ndarray, family: str | None = None) -> ObjectiveSpec:
    """Spec with L, mu computed from the spectrum of A (b must lie in range(A))."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
        raise ContractViolation(f"incompatible quadratic data {A.shape}, {b.shape}", provenance="convergence_lab")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ContractViolation("quadratic matrix must be symmetric", provenance="convergence_lab")
    lam, Q = np.linalg.eigh(A)
    L = float(lam[-1])
    if lam[0] < -1e-10 * max(L, 1.0) or L <= 0:
        raise ContractViolation("quadratic matrix must be positive semidefinite and nonzero", provenance="convergence_lab")
    nonzero = lam > 1e-10 * L
    if family is None:
        family = "strongly-convex-quadratic" if nonzero.all() else "convex-singular-quadratic"
    coeff = Q.T @ b
    if np.any(np.abs(coeff[~nonzero]) > 1e-10 * max(1.0, np.linalg.norm(b))):
        raise ContractViolation("b has a component in the null space of A; J is unbounded below", provenance="convergence_lab")
    J_star = float(-0.5 * np.sum(coeff[nonzero] ** 2 / lam[nonzero]))
    return ObjectiveSpec(family=family, dim=A.shape[0], L=L, mu=float(lam[nonzero][0]), A=A, b=b, J_star=J_star)


def make_spec(family: str, dim: int, rng: np.random.Generator, *, cond: float | None = None) -> ObjectiveSpec:
    """Random instance of a family."""
    if family not in FAMILIES:
        raise ContractViolation(f"unknown family {family!r}; expected one of {FAMILIES}", provenance="convergence_lab")
    if dim < 1:
        raise ContractViolation(f"dimension must be >= 1, got {dim}", provenance="convergence_lab")
    if family == "pl-nonconvex":
        return ObjectiveSpec(family=family, dim=dim, L=8.0, mu=1.0 / 32.0)
    cond = cond if cond is not None else float(10 ** rng.uniform(0.0, 2.0))
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), dim))
    lam[0], lam[-1] = 1.0, cond
    if family == "convex-singular-quadratic":
        if dim < 2:
            raise ContractViolation("a singular quadratic needs dim >= 2", provenance="convergence_lab")
        n_zero = int(rng.integers(1, dim))
        lam[:n_zero] = 0.0
        lam[n_zero] = 1.0
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    b = A @ rng.standard_normal(dim)
    return quadratic_spec(A, b, family)


@dataclass(frozen=True)
class NoisePolicy:
    mode: str
    epsilon: float
    fraction: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in NOISE_MODES:
            raise ContractViolation(f"unknown noise mode {self.mode!r}; expected one of {NOISE_MODES}", provenance="convergence_lab")
        if self.epsilon < 0:
            raise ContractViolation(f"epsilon must be >= 0, got {self.epsilon}", provenance="convergence_lab")
        if not 0 < self.fraction <= 1:
            raise ContractViolation(f"fraction must be in (0, 1], got {self.fraction}", provenance="convergence_lab")

    def sampler(self, kappa: float, L: float) -> Callable[[np.ndarray], np.ndarray]:
        """Noise generator for one run; deterministic under ``seed``."""
        rng = np.random.default_rng(self.seed)
        eps = self.epsilon

        def opposing(g: np.ndarray, magnitude: float) -> np.ndarray:
            gn = float(np.linalg.norm(g))
            if gn == 0.0 or magnitude == 0.0:
                return np.zeros_like(g)
            return -magnitude * (g / gn)

        if self.mode == "fixed-magnitude-random-direction":

            def fixed(g: np.ndarray) -> np.ndarray:
                d = rng.standard_normal(g.shape)
                return eps * d / np.linalg.norm(d) if eps > 0 else np.zeros_like(g)

            return fixed
        if self.mode == "adversarial-opposing":
            return lambda g: opposing(g, eps)

        frac = self.fraction

        def threshold(g: np.ndarray) -> np.ndarray:
            thr = descent_threshold(float(np.linalg.norm(g)), kappa, L)
            return opposing(g, min(eps, frac * thr))

        return threshold


@dataclass
class GdTrace:
    """Iterates and per-step quantities of one run; step i maps iterate i to i+1."""

    kappa: float
    epsilon: float
    x_star: np.ndarray
    iterates: list[np.ndarray] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    noise_norms: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.noise_norms)

    def threshold_held(self, i: int) -> bool:
        return self.noise_norms[i] < self.thresholds[i] or self.noise_norms[i] == 0.0


def descent_threshold(grad_norm: float, kappa: float, L: float) -> float:
    """Largest gradient error for which a step still decreases J: (2 - kL)/(4 - kL) * ||grad||."""
    if not kappa > 0 or not L > 0:
        raise DomainError(f"kappa and L must be positive, got {kappa}, {L}", provenance="convergence_lab")
    a = kappa * L
    if a > 1.0 + KAPPA_RTOL:
        raise DomainError(f"kappa*L = {a:.6g} exceeds 1", provenance="convergence_lab")
    a = min(a, 1.0)
    return (2.0 - a) / (4.0 - a) * grad_norm


def inexact_gd(
    spec: ObjectiveSpec,
    kappa: float,
    policy: NoisePolicy,
    k: int,
    x0: np.ndarray,
    *,
    stop_gap: float | None = None,
) -> GdTrace:
    if not kappa > 0:
        raise ContractViolation(f"kappa must be positive, got {kappa}", provenance="convergence_lab")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (spec.dim,):
        raise ContractViolation(f"x0 has shape {x.shape}, expected ({spec.dim},)", provenance="convergence_lab")
    noise = policy.sampler(kappa, spec.L)
    x_star = spec.minimizer_near(x)
    trace = GdTrace(kappa=kappa, epsilon=policy.epsilon, x_star=x_star)
    within = kappa * spec.L <= 1.0 + KAPPA_RTOL

    def record(xv: np.ndarray) -> np.ndarray:
        g = spec.gradient(xv)
        trace.iterates.append(xv)
        trace.objectives.append(spec.value(xv))
        trace.gaps.append(spec.gap(xv, x_star))
        trace.grad_norms.append(float(np.linalg.norm(g)))
        trace.distances.append(float(np.linalg.norm(xv - x_star)))
        return g

    g = record(x)
    for i in range(k):
        if stop_gap is not None and trace.gaps[-1] <= stop_gap:
            break
        xi = noise(g)
        xi_norm = float(np.linalg.norm(xi))
        if xi_norm > policy.epsilon * (1.0 + 1e-12):
            raise InvariantFailure(f"noise norm {xi_norm:.6e} exceeds epsilon {policy.epsilon:.6e} at step {i}", provenance="convergence_lab")
        trace.noise_norms.append(xi_norm)
        trace.thresholds.append(descent_threshold(trace.grad_norms[-1], kappa, spec.L) if within else math.nan)
        x = x - kappa * (g + xi)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at step {i + 1}", trace=trace, provenance="convergence_lab")
        g = record(x)
    return trace


@dataclass
class BoundReport:
    """Per-k margins (observed - bound) and where the hypotheses held."""

    kind: str
    margins: np.ndarray
    asserted: np.ndarray
    first_hypothesis_failure: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.asserted & (self.margins > 0)))

    @property
    def worst_margin(self) -> float:
        if not self.asserted.any():
            return -math.inf
        return float(np.max(self.margins[self.asserted]))

    @property
    def hypothesis_fraction(self) -> float:
        return float(self.asserted.mean()) if self.asserted.size else 0.0


def _margins(observed: np.ndarray, bound: np.ndarray) -> np.ndarray:
    slack = MARGIN_RTOL * (np.abs(bound) + np.abs(observed)) + MARGIN_ATOL
    raw = observed - bound
    # within roundoff of the bound counts as satisfied
    return np.where(raw > slack, raw, np.minimum(raw, 0.0))


def _first_false(mask: np.ndarray) -> int | None:
    idx = np.flatnonzero(~mask)
    return int(idx[0]) if idx.size else None


def check_convex_bound(trace: GdTrace, spec: ObjectiveSpec, kappa: float, epsilon: float) -> BoundReport:
    """gap_k <= d0^2/(2 k kappa) + d0 eps + kappa eps^2/(2 eta), eta = 1 - kappa L.

    Asserted at k while every earlier step kept its noise under the decrease
    threshold and stayed at gap >= d0 eps + kappa eps^2/(2 eta).
    Together they keep |x_i - x*| <= d0.
    """
    if not spec.is_convex:
        raise DomainError(f"{spec.family} is not convex", provenance="convergence_lab")
    eta = 1.0 - kappa * spec.L
    if not eta > 0:
        raise DomainError(f"convex bound needs kappa < 1/L (eta = {eta:.3g})", provenance="convergence_lab")
    K = trace.steps
    d0 = trace.distances[0]
    delta = d0 * epsilon + kappa * epsilon**2 / (2.0 * eta)
    ks = np.arange(1, K + 1)
    bound = d0**2 / (2.0 * ks * kappa) + d0 * epsilon + kappa * epsilon**2 / (2.0 * eta)
    observed = np.asarray(trace.gaps[1:], dtype=float)

    step_ok = np.array(
        [trace.threshold_held(i) and trace.gaps[i] >= delta for i in range(K)],
        dtype=bool,
    )
    asserted = np.logical_and.accumulate(step_ok) if K else step_ok
    return BoundReport(
        kind="convex",
        margins=_margins(observed, bound),
        asserted=asserted,
        first_hypothesis_failure=_first_false(step_ok),
    )


def check_pl_bounds(trace: GdTrace, spec: ObjectiveSpec, kappa: float, epsilon: float) -> BoundReport:
    """PL rates: kappa = 1/L holds unconditionally; kappa < 1/L needs the decrease threshold at every step."""
    aL = kappa * spec.L
    if aL > 1.0 + KAPPA_RTOL:
        raise DomainError(f"PL bounds need kappa <= 1/L (kappa*L = {aL:.6g})", provenance="convergence_lab")
    K = trace.steps
    ks = np.arange(1, K + 1)
    g0 = trace.gaps[0]
    mu, L = spec.mu, spec.L
    observed = np.asarray(trace.gaps[1:], dtype=float)
    notes: list[str] = []

    if abs(aL - 1.0) <= KAPPA_RTOL:
        rho = 1.0 - mu / L
        bound = rho**ks * g0 + (1.0 - rho**ks) * epsilon**2 / (2.0 * mu)
        asserted = np.ones(K, dtype=bool)
        first_fail = None
        kind = "pl-unit-step"
    else:
        theta = 1.0 - mu * (2.0 * kappa - L * kappa**2)
        kind = "pl-short-step"
        if not 0.0 < theta < 1.0:
            notes.append(f"theta={theta:.6g} outside (0,1); bound not asserted")
            return BoundReport(kind=kind, margins=np.full(K, math.nan), asserted=np.zeros(K, dtype=bool), notes=notes)
        c = math.sqrt(2.0 * L) * abs(L * kappa**2 - kappa) * math.sqrt(g0) * epsilon + L * kappa**2 * epsilon**2 / 2.0
        bound = theta**ks * g0 + (1.0 - theta**ks) / (1.0 - theta) * c
        step_ok = np.array([trace.threshold_held(i) for i in range(K)], dtype=bool)
        asserted = np.logical_and.accumulate(step_ok) if K else step_ok
        first_fail = _first_false(step_ok)
    return BoundReport(kind=kind, margins=_margins(observed, bound), asserted=asserted, first_hypothesis_failure=first_fail, notes=notes)


def sc_delta(spec: ObjectiveSpec, kappa: float, epsilon: float) -> float:
    L, mu = spec.L, spec.mu
    eta = 2.0 * kappa - 2.0 * kappa**2 * L
    s = math.sqrt(2.0 * L * eta)
    return (s + math.sqrt(2.0 * L * eta + 2.0 * L * eta * kappa * mu + kappa * mu)) / (mu * s) * epsilon


def check_sc_bound(trace: GdTrace, spec: ObjectiveSpec, kappa: float, epsilon: float) -> BoundReport:
    """||x_k - x*||^2 <= theta^k d0^2 + (1 - theta^k)/(1 - theta) (2 kappa d0 eps + kappa^2 eps^2/(2 L eta) + kappa^2 eps^2).

    theta = 1 - mu kappa, eta = 2 kappa - 2 kappa^2 L. Asserted while every
    earlier iterate stayed outside the delta-ball around x*.
    """
    if spec.family != "strongly-convex-quadratic":
        raise DomainError(f"{spec.family} is not strongly convex", provenance="convergence_lab")
    L, mu = spec.L, spec.mu
    if not 0 < kappa < 1.0 / L:
        raise DomainError(f"strongly convex bound needs 0 < kappa < 1/L (kappa*L = {kappa * L:.6g})", provenance="convergence_lab")
    K = trace.steps
    ks = np.arange(1, K + 1)
    theta = 1.0 - mu * kappa
    eta = 2.0 * kappa - 2.0 * kappa**2 * L
    d0 = trace.distances[0]
    c = 2.0 * kappa * d0 * epsilon + kappa**2 * epsilon**2 / (2.0 * L * eta) + kappa**2 * epsilon**2
    bound = theta**ks * d0**2 + (1.0 - theta**ks) / (1.0 - theta) * c
    observed = np.asarray(trace.distances[1:], dtype=float) ** 2

    delta = sc_delta(spec, kappa, epsilon)
    step_ok = np.array([trace.distances[i] >= delta for i in range(K)], dtype=bool)
    asserted = np.logical_and.accumulate(step_ok) if K else step_ok
    first_fail = _first_false(step_ok)
    notes = [f"delta={delta:.6g}"]
    if first_fail is not None:
        notes.append(f"entered delta-ball at iterate {first_fail}")
    return BoundReport(kind="strongly-convex", margins=_margins(observed, bound), asserted=asserted, first_hypothesis_failure=first_fail, notes=notes)


def lemma_gradient_bound_violations(trace: GdTrace, spec: ObjectiveSpec) -> int:
    """Count iterates where ||grad J||^2 / (2L) exceeds J - inf J beyond roundoff."""
    g = np.asarray(trace.grad_norms)
    gap = np.asarray(trace.gaps)
    lhs = g**2 / (2.0 * spec.L)
    return int(np.count_nonzero(lhs > gap * (1.0 + 1e-9) + MARGIN_ATOL))


def decrease_property(trace: GdTrace, spec: ObjectiveSpec, kappa: float) -> tuple[int, int]:
    """(eligible steps, failed decreases): steps under the threshold must lower J."""
    if not 0 < kappa * spec.L <= 1.0 + KAPPA_RTOL:
        raise DomainError(f"decrease property needs 0 < kappa <= 1/L (kappa*L = {kappa * spec.L:.6g})", provenance="convergence_lab")
    eligible = failed = 0
    for i in range(trace.steps):
        if trace.noise_norms[i] < trace.thresholds[i] and trace.gaps[i] > GAP_FLOOR:
            eligible += 1
            if not trace.gaps[i + 1] < trace.gaps[i]:
                failed += 1
    return eligible, failed


# ---- Randomized suite ----
def _suite_instance(idx: int, seed: int, k: int) -> dict[str, Any]:
    rng = np.random.default_rng([seed, idx])
    family = FAMILIES[idx % len(FAMILIES)]
    policy_mode = NOISE_MODES[(idx // len(FAMILIES)) % len(NOISE_MODES)]
    dim = int(rng.integers(2, 13))
    spec = make_spec(family, dim, rng)
    unit_step = rng.random() < 0.25
    kappa = 1.0 / spec.L if unit_step else float(rng.uniform(0.05, 0.95)) / spec.L
    x0 = rng.standard_normal(dim) * float(10 ** rng.uniform(-1.0, 1.0))
    g0 = float(np.linalg.norm(spec.gradient(x0)))
    epsilon = 0.0 if rng.random() < 0.1 else g0 * float(10 ** rng.uniform(-6.0, -0.5))
    policy = NoisePolicy(mode=policy_mode, epsilon=epsilon, fraction=0.9, seed=int(rng.integers(2**31)))
    trace = inexact_gd(spec, kappa, policy, k, x0)

    row: dict[str, Any] = {
        "instance": idx, "family": family, "dim": dim, "policy": policy_mode,
        "kappa": kappa, "kappa_L": kappa * spec.L, "epsilon": epsilon,
        "convex_margin": math.nan, "convex_hyp_fraction": math.nan,
        "sc_margin": math.nan, "sc_hyp_fraction": math.nan,
    }
    violations = 0
    if spec.is_convex and not unit_step:
        rep = check_convex_bound(trace, spec, kappa, epsilon)
        row["convex_margin"], row["convex_hyp_fraction"] = rep.worst_margin, rep.hypothesis_fraction
        violations += rep.violations
    rep = check_pl_bounds(trace, spec, kappa, epsilon)
    row["pl_margin"], row["pl_hyp_fraction"] = rep.worst_margin, rep.hypothesis_fraction
    violations += rep.violations
    if family == "strongly-convex-quadratic" and not unit_step:
        rep = check_sc_bound(trace, spec, kappa, epsilon)
        row["sc_margin"], row["sc_hyp_fraction"] = rep.worst_margin, rep.hypothesis_fraction
        violations += rep.violations
    row["lemma_violations"] = lemma_gradient_bound_violations(trace, spec)
    row["decrease_eligible"], row["decrease_failures"] = decrease_property(trace, spec, kappa)
    row["bound_violations"] = violations
    return row


def run_suite(n_instances: int, seed: int = 0, *, k: int = 200, workers: int = 1) -> list[dict[str, Any]]:
    """Randomized instances cycling over families and noise modes; rows ordered by instance id."""
    if n_instances < 1:
        raise ContractViolation(f"n_instances must be >= 1, got {n_instances}", provenance="convergence_lab")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(lambda i: _suite_instance(i, seed, k), range(n_instances)))
    else:
        rows = [_suite_instance(i, seed, k) for i in range(n_instances)]
    total = sum(r["bound_violations"] for r in rows)
    logger.info("Convergence suite: %d instance(s), %d bound violation(s)", n_instances, total)
    return rows


def write_suite_csv(rows: list[dict[str, Any]], out_path: str | Path) -> None:
    write_rows_csv(rows, SUITE_FIELDS, out_path, label="suite CSV")
