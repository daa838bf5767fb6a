"""Streaming incremental POD with a truncation error ledger.

Snapshots are ingested one at a time and the live factorization U ~ V diag(S) W^T
is maintained in the M-weighted geometry. Three things can happen per snapshot:

* the orthogonal residual p is below ``tol_p``: the projected coefficients are
  buffered (p-truncation) and ``e_p`` grows by p;
* otherwise the buffered block is flushed, the basis grows by one column and
  the small core matrix [[S, b], [0, p]] is diagonalized; its smallest singular
  value is either kept (exact update) or dropped into ``e_sv`` (SV-truncation).

``error_bound = e_p + e_sv`` dominates the Hilbert-Schmidt error of the
reconstruction for the whole stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.linalg

from .errors import (
    ArtifactError,
    ContractViolation,
    EmptyStreamError,
    NotFinalizedError,
    NumericalDegradationError,
)
from .weighted_space import WeightOperator, hs_norm_sq, weighted_norm, write_snapshots_mtx

logger = logging.getLogger("ipod-assim.ipod_core")

STATE_FORMAT = "ipod-state"
STATE_VERSION = 1
# residuals below this multiple of eps * sqrt(dim) * (rank + 1) * |u|_M count as exact dependence
ROUNDOFF_FACTOR = 8.0
EPS = np.finfo(float).eps


@dataclass(frozen=True)
class IpodTolerances:
    tol_p: float = 1e-8
    tol_sv: float = 1e-8
    tol_o: float = 1e-12
    reorth_cap: int = 5

    def __post_init__(self) -> None:
        if self.tol_p < 0 or self.tol_sv < 0:
            raise ContractViolation(f"tol_p and tol_sv must be nonnegative, got {self.tol_p}, {self.tol_sv}", provenance="ipod_core")
        if not self.tol_o > 0:
            raise ContractViolation(f"tol_o must be positive, got {self.tol_o}", provenance="ipod_core")
        if int(self.reorth_cap) < 1:
            raise ContractViolation(f"reorth_cap must be >= 1, got {self.reorth_cap}", provenance="ipod_core")

    @classmethod
    def uniform(cls, tol: float, **kwargs: float) -> IpodTolerances:
        """Same threshold for p- and SV-truncation."""
        return cls(tol_p=tol, tol_sv=tol, **kwargs)  # type: ignore[arg-type]


@dataclass(frozen=True)
class UpdateEvent:
    """What the last ``ipod_update`` did.

    ``lam`` holds the singular values going into the core update and ``mu``
    those of the core matrix; both are empty for buffered snapshots.
    """

    kind: str
    p: float
    b_norm: float
    lam: np.ndarray = field(default_factory=lambda: np.empty(0))
    mu: np.ndarray = field(default_factory=lambda: np.empty(0))
    reorth_passes: int = 0
    flushed: int = 0

    def interlacing_violation(self) -> float:
        """Largest amount by which mu_{l+1} <= p and mu_{i+1} <= lam_i <= mu_i fail (0 when they hold)."""
        if self.mu.size == 0:
            return 0.0
        worst = max(0.0, float(self.mu[-1] - self.p))
        l = self.lam.size
        if l:
            worst = max(worst, float(np.max(self.lam - self.mu[:l])), float(np.max(self.mu[1 : l + 1] - self.lam)))
        return max(worst, 0.0)


@dataclass
class IpodState:
    """Live factorization plus pending block and ledger.

    Single writer: ``ipod_update``/``ipod_finalize`` mutate the state in place and
    return it. The pending block holds coefficients in the coordinates of ``V``.
    """

    V: np.ndarray
    sigma: np.ndarray
    W: np.ndarray
    weight: WeightOperator
    tols: IpodTolerances
    pending: list[np.ndarray] = field(default_factory=list)
    V0: np.ndarray = field(default_factory=lambda: np.eye(1))
    e_p: float = 0.0
    e_sv: float = 0.0
    count: int = 1
    hs_sq_stream: float = 0.0
    last_event: UpdateEvent | None = None
    n_truncated_p: int = 0
    n_truncated_sv: int = 0

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    @property
    def d(self) -> int:
        return len(self.pending)

    @property
    def pending_B(self) -> np.ndarray:
        if not self.pending:
            return np.zeros((self.rank, 0))
        return np.column_stack(self.pending)

    @property
    def is_finalized(self) -> bool:
        return not self.pending

    @property
    def dim(self) -> int:
        return self.weight.dim


def _as_snapshot(u: np.ndarray, wt: WeightOperator) -> np.ndarray:
    v = np.asarray(u, dtype=float)
    if v.ndim != 1 or v.shape[0] != wt.dim:
        raise ContractViolation(f"snapshot shape {v.shape} does not match weight dim {wt.dim}", provenance="ipod_core")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("snapshot has non-finite entries", provenance="ipod_core")
    return v


def ipod_init(u1: np.ndarray, wt: WeightOperator, tols: IpodTolerances | None = None) -> IpodState:
    tols = tols or IpodTolerances()
    u = _as_snapshot(u1, wt)
    nrm = weighted_norm(u, wt)
    if nrm == 0.0:
        raise EmptyStreamError("first snapshot is zero; cannot normalize", provenance="ipod_core")
    state = IpodState(
        V=(u / nrm)[:, None],
        sigma=np.array([nrm]),
        W=np.ones((1, 1)),
        weight=wt,
        tols=tols,
        hs_sq_stream=nrm * nrm,
    )
    state.last_event = UpdateEvent(kind="init", p=nrm, b_norm=0.0)
    return state


def _flush(state: IpodState) -> np.ndarray:
    """SVD of [S B]; updates S and W, returns the rotation V_Q (deferred into V0)."""
    B = state.pending_B
    l, d = state.rank, B.shape[1]
    K = np.hstack([np.diag(state.sigma), B])
    VQ, SQ, WQt = scipy.linalg.svd(K, full_matrices=False, lapack_driver="gesdd")
    WQ = WQt.T
    state.W = np.vstack([state.W @ WQ[:l], WQ[l:]])
    state.sigma = SQ
    state.V0 = VQ
    state.pending = []
    logger.debug("Flushed pending block of width %d into rank-%d factorization", d, l)
    return VQ


def _roundoff_floor(state: IpodState, u_norm: float) -> float:
    return ROUNDOFF_FACTOR * EPS * np.sqrt(state.weight.dim) * (state.rank + 1) * u_norm


def _buffer(state: IpodState, b: np.ndarray, p: float) -> IpodState:
    state.pending.append(b)
    state.e_p += p
    state.n_truncated_p += 1
    state.last_event = UpdateEvent(kind="buffered", p=p, b_norm=float(np.linalg.norm(b)))
    if state.d == 10 * state.rank + 1:
        logger.warning("Pending block width %d exceeds 10x rank %d", state.d, state.rank)
    return state


def ipod_update(state: IpodState, u_new: np.ndarray) -> IpodState:
    wt, tols = state.weight, state.tols
    u = _as_snapshot(u_new, wt)
    V = state.V
    Mu = wt.apply(u)
    b = V.T @ Mu
    e = u - V @ b
    p = weighted_norm(e, wt)
    u_sq = float(u @ Mu)
    state.hs_sq_stream += u_sq
    state.count += 1

    # a full-rank basis spans the space; any residual is roundoff
    floor = _roundoff_floor(state, np.sqrt(u_sq))
    if state.rank >= wt.dim or p < tols.tol_p or p <= floor:
        return _buffer(state, b, p)

    e = e / p
    passes = 0
    c = V.T @ wt.apply(e)
    while np.max(np.abs(c)) > tols.tol_o:
        if passes == tols.reorth_cap:
            raise NumericalDegradationError(
                f"orthogonality defect {np.max(np.abs(c)):.3e} above tol_o={tols.tol_o:g} after {passes} passes",
                provenance="ipod_core",
            )
        e = e - V @ c
        nrm = weighted_norm(e, wt)
        b = b + p * c
        p = p * nrm
        if p <= floor:
            logger.debug("Residual collapsed to %.3e during reorthogonalization; buffering", p)
            return _buffer(state, b, p)
        e = e / nrm
        passes += 1
        c = V.T @ wt.apply(e)
    if passes:
        logger.debug("Reorthogonalized new direction in %d pass(es)", passes)

    flushed = state.d
    if flushed:
        VQ = _flush(state)
        b = VQ.T @ b

    l = state.rank
    lam = state.sigma.copy()
    Q = np.zeros((l + 1, l + 1))
    Q[:l, :l] = np.diag(state.sigma)
    Q[:l, l] = b
    Q[l, l] = p
    Vt, mu, Wtt = scipy.linalg.svd(Q, lapack_driver="gesdd")
    Wt = Wtt.T

    V1 = np.eye(l + 1)
    V1[:l, :l] = state.V0
    rot = V1 @ Vt
    Wext = np.zeros((state.W.shape[0] + 1, l + 1))
    Wext[:-1, :l] = state.W
    Wext[-1, l] = 1.0
    Ve = np.column_stack([V, e])

    if mu[-1] > tols.tol_sv:
        kind = "exact"
        state.V = Ve @ rot
        state.sigma = mu
        state.W = Wext @ Wt
    else:
        kind = "sv-truncated"
        state.V = Ve @ rot[:, :l]
        state.sigma = mu[:l]
        state.W = Wext @ Wt[:, :l]
        state.e_sv += float(mu[-1])
        state.n_truncated_sv += 1
    state.V0 = np.eye(state.rank)
    state.last_event = UpdateEvent(
        kind=kind, p=p, b_norm=float(np.linalg.norm(b)), lam=lam, mu=mu, reorth_passes=passes, flushed=flushed
    )
    return state


def ipod_finalize(state: IpodState) -> IpodState:
    """Flush the pending block and fold the deferred rotation into V."""
    if state.pending:
        _flush(state)
    if state.V0.shape[0] != state.rank or not np.array_equal(state.V0, np.eye(state.rank)):
        state.V = state.V @ state.V0
        state.V0 = np.eye(state.rank)
    logger.debug(
        "Finalized: count=%d rank=%d e_p=%.3e e_sv=%.3e (p-trunc %d, sv-trunc %d)",
        state.count, state.rank, state.e_p, state.e_sv, state.n_truncated_p, state.n_truncated_sv,
    )
    return state


def ipod_compress(snapshots: Iterable[np.ndarray], wt: WeightOperator, tols: IpodTolerances | None = None) -> IpodState:
    it = iter(snapshots)
    try:
        first = next(it)
    except StopIteration:
        raise EmptyStreamError("no snapshots to compress", provenance="ipod_core") from None
    state = ipod_init(first, wt, tols)
    for u in it:
        ipod_update(state, u)
    return ipod_finalize(state)


def error_bound(state: IpodState) -> float:
    return state.e_p + state.e_sv


def energy_ratio(state: IpodState) -> float:
    """sqrt(retained energy / streamed energy); pending columns count as retained."""
    if state.hs_sq_stream <= 0.0:
        raise EmptyStreamError("energy ratio of an empty stream is undefined", provenance="ipod_core")
    retained = float(np.sum(state.sigma**2))
    if state.pending:
        retained += float(np.sum(state.pending_B**2))
    return float(min(np.sqrt(retained / state.hs_sq_stream), 1.0))


def reconstruct(state: IpodState, j: int, tau: float = 1.0) -> np.ndarray:
    """Decompressed snapshot j (1-based) of a stream of sqrt(tau)-scaled snapshots."""
    if not state.is_finalized:
        raise NotFinalizedError(f"{state.d} snapshot(s) still pending; call ipod_finalize first", provenance="ipod_core")
    if not 1 <= j <= state.count:
        raise ContractViolation(f"snapshot index {j} outside 1..{state.count}", provenance="ipod_core")
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}", provenance="ipod_core")
    return (state.V @ (state.sigma * state.W[j - 1])) / np.sqrt(tau)


def reconstruction_error(state: IpodState, U: np.ndarray) -> float:
    """Exact HS error ||U - V S W^T|| in the M geometry (needs the full snapshot matrix)."""
    if not state.is_finalized:
        raise NotFinalizedError("reconstruction error needs a finalized state", provenance="ipod_core")
    return float(np.sqrt(max(hs_norm_sq(np.asarray(U) - (state.V * state.sigma) @ state.W.T, state.weight), 0.0)))


def retained_storage(state: IpodState) -> tuple[int, int]:
    """Shape of the retained basis (m, l)."""
    return state.dim, state.rank


def storage_fraction(state: IpodState) -> float:
    return state.rank / state.count


# ---- Persistence ----
def save_state(path: str | Path, state: IpodState) -> None:
    if not state.is_finalized:
        raise NotFinalizedError("only finalized states can be saved", provenance="ipod_core")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    t = state.tols
    with out.open("wb") as fh:
        np.savez(
            fh,
            format=np.array(STATE_FORMAT),
            version=np.array(STATE_VERSION),
            V=state.V,
            sigma=state.sigma,
            W=state.W,
            fingerprint=np.array(state.weight.fingerprint()),
            ledger=np.array([state.e_p, state.e_sv, state.hs_sq_stream]),
            counters=np.array([state.count, state.n_truncated_p, state.n_truncated_sv], dtype=np.int64),
            tolerances=np.array([t.tol_p, t.tol_sv, t.tol_o, float(t.reorth_cap)]),
        )
    logger.info("Wrote compression state: %s (m=%d, rank=%d, count=%d)", out, state.dim, state.rank, state.count)


def load_state(path: str | Path, wt: WeightOperator) -> IpodState:
    src = Path(path)
    if not src.is_file():
        raise ArtifactError(f"state file not found: {src}", provenance="ipod_core")
    with np.load(src, allow_pickle=False) as z:
        if str(z["format"]) != STATE_FORMAT or int(z["version"]) != STATE_VERSION:
            raise ArtifactError(f"{src} is not a version-{STATE_VERSION} {STATE_FORMAT} container", provenance="ipod_core")
        if str(z["fingerprint"]) != wt.fingerprint():
            raise ContractViolation(f"{src} was written with a different weight operator", provenance="ipod_core")
        e_p, e_sv, hs = (float(x) for x in z["ledger"])
        count, n_p, n_sv = (int(x) for x in z["counters"])
        tol_p, tol_sv, tol_o, cap = (float(x) for x in z["tolerances"])
        V, sigma, W = z["V"], z["sigma"], z["W"]
    return IpodState(
        V=V,
        sigma=sigma,
        W=W,
        weight=wt,
        tols=IpodTolerances(tol_p=tol_p, tol_sv=tol_sv, tol_o=tol_o, reorth_cap=int(cap)),
        V0=np.eye(sigma.size),
        e_p=e_p,
        e_sv=e_sv,
        count=count,
        hs_sq_stream=hs,
        n_truncated_p=n_p,
        n_truncated_sv=n_sv,
    )


def export_basis_mtx(path: str | Path, state: IpodState) -> None:
    if not state.is_finalized:
        raise NotFinalizedError("export needs a finalized state", provenance="ipod_core")
    write_snapshots_mtx(path, state.V)
