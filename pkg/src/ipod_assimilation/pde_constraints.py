"""Discrete forward and adjoint solvers.

Two problems share one interface (``n_steps``, ``tau``, ``mass``, ``forward_step``,
``adjoint_step``, ``weight``) so the optimization layer can drive either:

* ``DiscreteProblem``: backward-Euler P1 FEM for the parabolic interface
  equation on [0,2]x[0,1] with diffusion beta_plus left of x = 1 and beta_minus
  right of it, homogeneous Dirichlet data eliminated;
* ``BurgersProblem``: 1D viscous Burgers on [0,1], implicit Euler with a Newton
  solve per step and the transposed linearization for the adjoint.

Load vectors are precomputed for every time level at assembly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ArtifactError, ContractViolation, NewtonConvergenceError
from .weighted_space import WeightOperator, spd_solver

logger = logging.getLogger("ipod-assim.pde_constraints")

Forcing2D = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
Forcing1D = Callable[[np.ndarray, float], np.ndarray]

WEIGHT_CHOICES = ("L2-mass", "H1")

# interior 3-point rule (barycentric points, equal weights 1/3)
_QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_LOCAL_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def _time_grid(tau: float, T: float) -> int:
    if not tau > 0 or not T > 0:
        raise ContractViolation(f"tau and T must be positive, got tau={tau}, T={T}", provenance="pde_constraints")
    n = int(round(T / tau))
    if n < 1 or abs(n * tau - T) > 1e-12 * max(1.0, T):
        raise ContractViolation(f"T={T} is not an integer multiple of tau={tau}", provenance="pde_constraints")
    return n


def _check_vector(v: np.ndarray, m: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (m,):
        raise ContractViolation(f"{what} has shape {a.shape}, expected ({m},)", provenance="pde_constraints")
    return a


# ---- Mesh ----
@dataclass(frozen=True, eq=False)
class InterfaceMesh:
    """Structured P1 triangulation of [0,2]x[0,1] with the interface x = 1 on mesh edges."""

    h: float
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    dirichlet_mask: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    @cached_property
    def areas(self) -> np.ndarray:
        P = self.nodes[self.elements]
        e1 = P[:, 1] - P[:, 0]
        e2 = P[:, 2] - P[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def element_beta(self, beta_plus: float, beta_minus: float) -> np.ndarray:
        """Diffusion per element: beta_plus on (0,1)x(0,1), beta_minus on (1,2)x(0,1)."""
        return np.where(self.centroids[:, 0] < 1.0, beta_plus, beta_minus)

    def free_coordinates(self) -> np.ndarray:
        return self.nodes[self.free_nodes]


def build_interface_mesh(h: float) -> InterfaceMesh:
    if not h > 0:
        raise ContractViolation(f"mesh size must be positive, got {h}", provenance="pde_constraints")
    n = int(round(1.0 / h))
    if n < 1 or abs(n * h - 1.0) > 1e-12:
        raise ContractViolation(f"h={h} does not divide 1; the interface x=1 would cut elements", provenance="pde_constraints")
    nx, ny = 2 * n, n
    hh = 1.0 / n
    xs, ys = np.meshgrid(np.arange(nx + 1) * hh, np.arange(ny + 1) * hh)
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    a = (j * (nx + 1) + i).ravel()
    b = a + 1
    c = a + nx + 2
    d = a + nx + 1
    elements = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])

    x, y = nodes[:, 0], nodes[:, 1]
    tol = 1e-12
    boundary = (x < tol) | (x > 2.0 - tol) | (y < tol) | (y > 1.0 - tol)
    return InterfaceMesh(h=hh, nodes=nodes, elements=elements, dirichlet_mask=boundary)


# ---- Assembly ----
def assemble_p1(mesh: InterfaceMesh, coefficient: np.ndarray | float = 1.0) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Full (unreduced) P1 mass and stiffness; ``coefficient`` is per element or scalar."""
    P = mesh.nodes[mesh.elements]
    area = mesh.areas
    if np.any(area <= 0):
        raise ContractViolation("mesh has non-positively oriented elements", provenance="pde_constraints")
    beta = np.broadcast_to(np.asarray(coefficient, dtype=float), area.shape)

    # barycentric gradients, shape (E, 3, 2)
    x, y = P[:, :, 0], P[:, :, 1]
    G = np.empty(P.shape)
    G[:, 0] = np.column_stack([y[:, 1] - y[:, 2], x[:, 2] - x[:, 1]])
    G[:, 1] = np.column_stack([y[:, 2] - y[:, 0], x[:, 0] - x[:, 2]])
    G[:, 2] = np.column_stack([y[:, 0] - y[:, 1], x[:, 1] - x[:, 0]])
    G /= (2.0 * area)[:, None, None]

    K_loc = (area * beta)[:, None, None] * np.einsum("eik,ejk->eij", G, G)
    M_loc = area[:, None, None] * _LOCAL_MASS[None]

    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    N = mesh.n_nodes
    mass = sp.coo_matrix((M_loc.ravel(), (rows, cols)), shape=(N, N)).tocsr()
    stiff = sp.coo_matrix((K_loc.ravel(), (rows, cols)), shape=(N, N)).tocsr()
    return mass, stiff


def assemble_load(mesh: InterfaceMesh, f: Forcing2D, t: float) -> np.ndarray:
    """Full load vector int f(., t) phi_i by the interior 3-point rule."""
    P = mesh.nodes[mesh.elements]
    qx = _QUAD_BARY @ P[:, :, 0].T  # (3 points, E)
    qy = _QUAD_BARY @ P[:, :, 1].T
    fq = np.asarray(f(qx, qy, t), dtype=float)
    # sum_q w_q f(q) phi_i(q), phi_i(q) = barycentric coordinate i of point q
    local = (mesh.areas / 3.0)[:, None] * (fq.T @ _QUAD_BARY)
    return np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


def interface_forcing(x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    """f+ = t y + sqrt(x) + 5 left of x = 1, f- = t x + sqrt(x y) + 6 right of it."""
    left = t * y + np.sqrt(x) + 5.0
    right = t * x + np.sqrt(x * y) + 6.0
    return np.where(x < 1.0, left, right)


def zero_forcing(x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    return np.zeros_like(x)


def manufactured_solution(x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    return np.exp(-t) * np.sin(0.5 * np.pi * x) * np.sin(np.pi * y)


def manufactured_forcing(x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
    """Forcing matching ``manufactured_solution`` for unit diffusion."""
    return (1.25 * np.pi**2 - 1.0) * manufactured_solution(x, y, t)


FORCINGS: dict[str, Forcing2D] = {
    "interface": interface_forcing,
    "zero": zero_forcing,
    "manufactured": manufactured_forcing,
}


def truth_initial_condition(mesh: InterfaceMesh) -> np.ndarray:
    """sqrt(x y (2-x)(1-y)) at the free nodes."""
    x, y = mesh.free_coordinates().T
    return np.sqrt(np.clip(x * y * (2.0 - x) * (1.0 - y), 0.0, None))


# ---- Problems ----
@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    """Assembled interface problem restricted to the free nodes."""

    mesh: InterfaceMesh = field(repr=False)
    mass: sp.csr_matrix = field(repr=False)
    stiffness: sp.csr_matrix = field(repr=False)
    h1_weight: sp.csr_matrix = field(repr=False)
    forcing: np.ndarray = field(repr=False)
    tau: float
    n_steps: int
    beta_plus: float
    beta_minus: float

    @property
    def T(self) -> float:
        return self.tau * self.n_steps

    @property
    def dim(self) -> int:
        return int(self.mass.shape[0])

    @cached_property
    def system_solver(self) -> Callable[[np.ndarray], np.ndarray]:
        return spd_solver(self.mass + self.tau * self.stiffness)

    @cached_property
    def mass_weight(self) -> WeightOperator:
        return WeightOperator.from_matrix(self.mass)

    @cached_property
    def h1_weight_operator(self) -> WeightOperator:
        return WeightOperator.from_matrix(self.h1_weight)

    def weight(self, choice: str) -> WeightOperator:
        return _pick_weight(self, choice)

    def forward_step(self, u_prev: np.ndarray, j: int) -> np.ndarray:
        return forward_step_linear(self, u_prev, j)

    def adjoint_step(self, ustar_next: np.ndarray, u_next: np.ndarray, obs_next: np.ndarray) -> np.ndarray:
        return adjoint_step_linear(self, ustar_next, u_next, obs_next)

    def coordinates(self) -> np.ndarray:
        return self.mesh.free_coordinates()


def _pick_weight(problem: DiscreteProblem | BurgersProblem, choice: str) -> WeightOperator:
    if choice == "L2-mass":
        return problem.mass_weight
    if choice == "H1":
        return problem.h1_weight_operator
    raise ContractViolation(f"unknown weight choice {choice!r}; expected one of {WEIGHT_CHOICES}", provenance="pde_constraints")


def assemble_interface_problem(
    h: float,
    tau: float,
    T: float,
    beta_plus: float = 1.0,
    beta_minus: float = 0.5,
    forcing_spec: Union[str, Forcing2D] = "interface",
) -> DiscreteProblem:
    if not (beta_plus > 0 and beta_minus > 0):
        raise ContractViolation(f"diffusion values must be positive, got {beta_plus}, {beta_minus}", provenance="pde_constraints")
    n = _time_grid(tau, T)
    mesh = build_interface_mesh(h)
    mass_full, stiff_full = assemble_p1(mesh, mesh.element_beta(beta_plus, beta_minus))
    _, lap_full = assemble_p1(mesh, 1.0)
    free = mesh.free_nodes
    mass = mass_full[free][:, free].tocsr()
    stiff = stiff_full[free][:, free].tocsr()
    h1 = (mass + lap_full[free][:, free]).tocsr()

    if isinstance(forcing_spec, str):
        try:
            f = FORCINGS[forcing_spec]
        except KeyError:
            raise ContractViolation(f"unknown forcing {forcing_spec!r}; expected one of {sorted(FORCINGS)}", provenance="pde_constraints")
    else:
        f = forcing_spec
    loads = np.vstack([assemble_load(mesh, f, j * tau)[free] for j in range(n + 1)])

    problem = DiscreteProblem(
        mesh=mesh,
        mass=mass,
        stiffness=stiff,
        h1_weight=h1,
        forcing=loads,
        tau=float(tau),
        n_steps=n,
        beta_plus=float(beta_plus),
        beta_minus=float(beta_minus),
    )
    logger.debug("Assembled interface problem: h=%g m=%d n=%d tau=%g", mesh.h, problem.dim, n, tau)
    return problem


def forward_step_linear(problem: DiscreteProblem, u_prev: np.ndarray, j: int) -> np.ndarray:
    """u^{j+1} from u^j: (M + tau A) u^{j+1} = M u^j + tau f^{j+1}."""
    if not 0 <= j < problem.n_steps:
        raise ContractViolation(f"time index {j} outside 0..{problem.n_steps - 1}", provenance="pde_constraints")
    u = _check_vector(u_prev, problem.dim, "u_prev")
    return problem.system_solver(problem.mass @ u + problem.tau * problem.forcing[j + 1])


def adjoint_step_linear(
    problem: DiscreteProblem, ustar_next: np.ndarray, data_snapshot: np.ndarray, obs_snapshot: np.ndarray
) -> np.ndarray:
    """u*^j from u*^{j+1}: (M + tau A) u*^j = M u*^{j+1} + tau M (obs^{j+1} - u^{j+1})."""
    m = problem.dim
    w = _check_vector(ustar_next, m, "ustar_next")
    r = _check_vector(obs_snapshot, m, "obs_snapshot") - _check_vector(data_snapshot, m, "data_snapshot")
    return problem.system_solver(problem.mass @ (w + problem.tau * r))


# ---- 1D viscous Burgers ----
def assemble_p1_1d(n_cells: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Full P1 mass and unit stiffness on a uniform grid of [0,1]."""
    if n_cells < 2:
        raise ContractViolation(f"need at least 2 cells, got {n_cells}", provenance="pde_constraints")
    h = 1.0 / n_cells
    N = n_cells + 1
    left = np.arange(n_cells)
    rows = np.concatenate([left, left, left + 1, left + 1])
    cols = np.concatenate([left, left + 1, left, left + 1])
    mvals = np.concatenate([np.full(n_cells, 2.0), np.ones(n_cells), np.ones(n_cells), np.full(n_cells, 2.0)]) * h / 6.0
    kvals = np.concatenate([np.ones(n_cells), -np.ones(n_cells), -np.ones(n_cells), np.ones(n_cells)]) / h
    mass = sp.coo_matrix((mvals, (rows, cols)), shape=(N, N)).tocsr()
    stiff = sp.coo_matrix((kvals, (rows, cols)), shape=(N, N)).tocsr()
    return mass, stiff


@dataclass(frozen=True, eq=False)
class BurgersProblem:
    """u_t - nu u_xx + u u_x = f on (0,1), u = 0 at both ends, unknowns at interior nodes."""

    n_cells: int
    nu: float
    tau: float
    n_steps: int
    mass: sp.csr_matrix = field(repr=False)
    stiffness: sp.csr_matrix = field(repr=False)
    h1_weight: sp.csr_matrix = field(repr=False)
    forcing: np.ndarray = field(repr=False)
    newton_tol: float = 1e-12
    newton_max_iter: int = 25

    @property
    def T(self) -> float:
        return self.tau * self.n_steps

    @property
    def dim(self) -> int:
        return self.n_cells - 1

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)[1:-1]

    @cached_property
    def mass_weight(self) -> WeightOperator:
        return WeightOperator.from_matrix(self.mass)

    @cached_property
    def h1_weight_operator(self) -> WeightOperator:
        return WeightOperator.from_matrix(self.h1_weight)

    def weight(self, choice: str) -> WeightOperator:
        return _pick_weight(self, choice)

    def forward_step(self, u_prev: np.ndarray, j: int) -> np.ndarray:
        return forward_step_burgers(self, u_prev, j)

    def adjoint_step(self, ustar_next: np.ndarray, u_next: np.ndarray, obs_next: np.ndarray) -> np.ndarray:
        return adjoint_step_burgers(self, ustar_next, u_next, obs_next - u_next)

    def coordinates(self) -> np.ndarray:
        return self.nodes[:, None]


def burgers_truth_initial_condition(problem: BurgersProblem) -> np.ndarray:
    return np.sin(np.pi * problem.nodes)


def assemble_burgers_problem(
    n_cells: int, tau: float, T: float, nu: float, forcing: Forcing1D | None = None
) -> BurgersProblem:
    if not nu > 0:
        raise ContractViolation(f"viscosity must be positive, got {nu}", provenance="pde_constraints")
    n = _time_grid(tau, T)
    mass_full, stiff_full = assemble_p1_1d(n_cells)
    mass = mass_full[1:-1, 1:-1].tocsr()
    stiff = stiff_full[1:-1, 1:-1].tocsr()
    x = np.linspace(0.0, 1.0, n_cells + 1)
    if forcing is None:
        loads = np.zeros((n + 1, n_cells - 1))
    else:
        # lumped load: nodal values times the mass row sums
        lumped = np.asarray(mass_full.sum(axis=1)).ravel()
        loads = np.vstack([(lumped * forcing(x, j * tau))[1:-1] for j in range(n + 1)])
    return BurgersProblem(
        n_cells=int(n_cells),
        nu=float(nu),
        tau=float(tau),
        n_steps=n,
        mass=mass,
        stiffness=stiff,
        h1_weight=(mass + stiff).tocsr(),
        forcing=loads,
    )


def burgers_convection(u: np.ndarray) -> np.ndarray:
    """Galerkin convection int u u_x phi_i for interior unknowns ``u``."""
    U = np.pad(np.asarray(u, dtype=float), 1)
    left, right = U[:-1], U[1:]
    jump = right - left
    out = np.zeros_like(U)
    np.add.at(out, np.arange(left.size), jump * (2.0 * left + right) / 6.0)
    np.add.at(out, np.arange(1, U.size), jump * (2.0 * right + left) / 6.0)
    return out[1:-1]


def burgers_convection_jacobian(u: np.ndarray) -> sp.csr_matrix:
    U = np.pad(np.asarray(u, dtype=float), 1)
    N = U.size
    k = np.arange(N - 1)
    L, R = U[:-1], U[1:]
    rows = np.concatenate([k, k, k + 1, k + 1])
    cols = np.concatenate([k, k + 1, k, k + 1])
    vals = np.concatenate([(R - 4.0 * L) / 6.0, (L + 2.0 * R) / 6.0, -(R + 2.0 * L) / 6.0, (4.0 * R - L) / 6.0])
    full = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
    return full[1:-1, 1:-1].tocsr()


def burgers_residual(problem: BurgersProblem, u: np.ndarray, u_prev: np.ndarray, j: int) -> np.ndarray:
    """Implicit Euler residual of step j -> j+1 evaluated at candidate ``u``."""
    return problem.mass @ (u - u_prev) + problem.tau * (
        problem.nu * (problem.stiffness @ u) + burgers_convection(u) - problem.forcing[j + 1]
    )


def burgers_jacobian(problem: BurgersProblem, u: np.ndarray) -> sp.csr_matrix:
    """d(residual)/du = M + tau nu A + tau N'(u)."""
    return (problem.mass + problem.tau * (problem.nu * problem.stiffness + burgers_convection_jacobian(u))).tocsr()


def burgers_newton(problem: BurgersProblem, u_prev: np.ndarray, j: int) -> tuple[np.ndarray, list[float]]:
    """Newton solve of one implicit step; returns the new state and the residual history."""
    if not 0 <= j < problem.n_steps:
        raise ContractViolation(f"time index {j} outside 0..{problem.n_steps - 1}", provenance="pde_constraints")
    up = _check_vector(u_prev, problem.dim, "u_prev")
    scale = 1.0 + np.linalg.norm(problem.mass @ up) + problem.tau * np.linalg.norm(problem.forcing[j + 1])
    u = up.copy()
    res = burgers_residual(problem, u, up, j)
    history = [float(np.linalg.norm(res))]
    while history[-1] > problem.newton_tol * scale:
        if len(history) > problem.newton_max_iter:
            raise NewtonConvergenceError(
                f"Newton did not converge in {problem.newton_max_iter} iterations at step {j + 1}",
                residuals=history,
                step=j + 1,
                provenance="pde_constraints",
            )
        u = u - spla.spsolve(burgers_jacobian(problem, u).tocsc(), res)
        res = burgers_residual(problem, u, up, j)
        history.append(float(np.linalg.norm(res)))
    return u, history


def forward_step_burgers(problem: BurgersProblem, u_prev: np.ndarray, j: int) -> np.ndarray:
    u, history = burgers_newton(problem, u_prev, j)
    logger.debug("Burgers step %d: %d Newton iteration(s), residual %.3e", j + 1, len(history) - 1, history[-1])
    return u


def adjoint_step_burgers(
    problem: BurgersProblem, ustar_next: np.ndarray, u_forward_snapshot: np.ndarray, mismatch: np.ndarray
) -> np.ndarray:
    """J(u^{j+1})^T u*^j = M u*^{j+1} + tau M (obs^{j+1} - u^{j+1})."""
    m = problem.dim
    w = _check_vector(ustar_next, m, "ustar_next")
    r = _check_vector(mismatch, m, "mismatch")
    u = _check_vector(u_forward_snapshot, m, "u_forward_snapshot")
    jac_t = burgers_jacobian(problem, u).T.tocsc()
    return spla.spsolve(jac_t, problem.mass @ (w + problem.tau * r))


# ---- Trajectories and observations ----
@dataclass(frozen=True, eq=False)
class Trajectory:
    """Forward snapshots u^1..u^n as rows."""

    snapshots: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        if self.snapshots.ndim != 2:
            raise ContractViolation("trajectory snapshots must be a 2D array", provenance="pde_constraints")
        if not np.all(np.isfinite(self.snapshots)):
            raise ContractViolation("trajectory has non-finite entries", provenance="pde_constraints")

    @property
    def n_steps(self) -> int:
        return int(self.snapshots.shape[0])

    @property
    def dim(self) -> int:
        return int(self.snapshots.shape[1])

    def __getitem__(self, j: int) -> np.ndarray:
        """Snapshot at time index j (1-based)."""
        return self.snapshots[j - 1]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    values: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[0])

    def __getitem__(self, j: int) -> np.ndarray:
        return self.values[j - 1]


def solve_forward(
    problem: DiscreteProblem | BurgersProblem,
    u0: np.ndarray,
    on_snapshot: Callable[[int, np.ndarray], None] | None = None,
    *,
    retain: bool = True,
) -> Trajectory | None:
    """March u^0 -> u^n; ``on_snapshot(j, u^j)`` sees every new state."""
    u = _check_vector(u0, problem.dim, "u0")
    kept: list[np.ndarray] = []
    for j in range(problem.n_steps):
        u = problem.forward_step(u, j)
        if on_snapshot is not None:
            on_snapshot(j + 1, u)
        if retain:
            kept.append(u)
    if not retain:
        return None
    return Trajectory(snapshots=np.vstack(kept), tau=problem.tau)


def synth_observations(truth: Trajectory, noise_sigma: float, seed: int) -> ObservationSet:
    if noise_sigma < 0:
        raise ContractViolation(f"noise_sigma must be nonnegative, got {noise_sigma}", provenance="pde_constraints")
    values = truth.snapshots.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values += noise_sigma * rng.standard_normal(values.shape)
    return ObservationSet(values=values, noise_sigma=float(noise_sigma), seed=int(seed))


# ---- Trajectory I/O ----
_RAW_HEADER = np.dtype([("m", "<i8"), ("n", "<i8"), ("tau", "<f8")])


def write_trajectory_raw(path: str | Path, traj: Trajectory) -> None:
    """Header (int64 m, int64 n, float64 tau) then the m x n matrix column-major."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([(traj.dim, traj.n_steps, traj.tau)], dtype=_RAW_HEADER)
    with out.open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(traj.snapshots, dtype="<f8").tobytes())
    logger.info("Wrote trajectory: %s (m=%d, n=%d)", out, traj.dim, traj.n_steps)


def read_trajectory_raw(path: str | Path) -> Trajectory:
    src = Path(path)
    if not src.is_file():
        raise ArtifactError(f"trajectory file not found: {src}", provenance="pde_constraints")
    raw = src.read_bytes()
    if len(raw) < _RAW_HEADER.itemsize:
        raise ArtifactError(f"{src} is too short for a trajectory header", provenance="pde_constraints")
    header = np.frombuffer(raw[: _RAW_HEADER.itemsize], dtype=_RAW_HEADER)[0]
    m, n, tau = int(header["m"]), int(header["n"]), float(header["tau"])
    data = np.frombuffer(raw[_RAW_HEADER.itemsize :], dtype="<f8")
    if data.size != m * n:
        raise ArtifactError(f"{src}: expected {m * n} values, found {data.size}", provenance="pde_constraints")
    return Trajectory(snapshots=data.reshape(n, m).astype(float), tau=tau)


def write_trajectory_mtx(path: str | Path, traj: Trajectory) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(out), sp.coo_matrix(traj.snapshots.T), comment=f"ipod-assim trajectory tau={traj.tau!r}", precision=17)
    logger.info("Wrote trajectory: %s (m=%d, n=%d)", out, traj.dim, traj.n_steps)
