"""Weighted Euclidean geometry R^m_M.

A ``WeightOperator`` wraps an SPD matrix M (or the identity) and defines the
inner product (x, y)_M = y^T M x used by the compression engine. The batch
``core_weighted_svd`` routes through a sparse Cholesky factor M = G G^T and
serves as the reference the streaming engine is tested against.

Sparse SPD factorizations use CHOLMOD (scikit-sparse) when it is importable and
fall back to SciPy's SuperLU in symmetric mode otherwise.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, EmptyStreamError, WeightNotSPDError

logger = logging.getLogger("ipod-assim.weighted_space")

SYMMETRY_RTOL = 1e-12
CORE_SV_RTOL = 1e-14

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    from sksparse.cholmod import cholesky as cholmod_cholesky

    CHOLMOD_AVAILABLE = True
except Exception:
    CHOLMOD_AVAILABLE = False


# ---- Sparse SPD factorization ----
@dataclass(frozen=True)
class CholeskyFactor:
    """Lower factor L with M[perm][:, perm] = L L^T.

    Writing G = P^T L (P the row permutation selecting ``perm``) gives M = G G^T,
    which is the isometry R^m_M -> R^m used by the batch weighted SVD.
    """

    lower: sp.csc_matrix
    perm: np.ndarray
    backend: str

    def gt_apply(self, U: np.ndarray) -> np.ndarray:
        """Return G^T U = L^T (P U)."""
        return np.asarray(self.lower.T @ U[self.perm])

    def gt_solve(self, Z: np.ndarray) -> np.ndarray:
        """Return G^{-T} Z = P^T L^{-T} Z."""
        upper = sp.csr_matrix(self.lower.T)
        y = spla.spsolve_triangular(upper, np.asarray(Z, dtype=float), lower=False)
        out = np.empty_like(y)
        out[self.perm] = y
        return out

    def as_dense(self) -> np.ndarray:
        """Return G = P^T L as a dense array (tests and small problems)."""
        dense = self.lower.toarray()
        out = np.empty_like(dense)
        out[self.perm] = dense
        return out


def _superlu_cholesky(matrix: sp.csc_matrix) -> CholeskyFactor:
    """Symmetric-mode SuperLU with minimum-degree ordering, rescaled to L L^T."""
    try:
        lu = spla.splu(
            matrix,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise WeightNotSPDError(f"sparse factorization failed: {e}", provenance="weighted_space")
    d = lu.U.diagonal()
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise WeightNotSPDError("weight matrix is not positive definite (nonpositive pivot)", provenance="weighted_space")
    if not np.array_equal(lu.perm_r, lu.perm_c):
        # Pivoting broke symmetry of the ordering; a dense factor is still exact.
        logger.debug("SuperLU row/column orderings differ; using dense Cholesky for m=%d", matrix.shape[0])
        return _dense_cholesky(matrix)
    perm = np.argsort(lu.perm_c)
    lower = sp.csc_matrix(lu.L @ sp.diags(np.sqrt(d)))
    return CholeskyFactor(lower=lower, perm=perm, backend="superlu")


def _dense_cholesky(matrix: sp.spmatrix) -> CholeskyFactor:
    try:
        L = scipy.linalg.cholesky(matrix.toarray(), lower=True)
    except np.linalg.LinAlgError as e:
        raise WeightNotSPDError(f"Cholesky failed: {e}", provenance="weighted_space")
    return CholeskyFactor(lower=sp.csc_matrix(L), perm=np.arange(matrix.shape[0]), backend="dense")


def factorize_spd(matrix: sp.spmatrix) -> CholeskyFactor:
    """Sparse Cholesky with a fill-reducing ordering."""
    csc = sp.csc_matrix(matrix, dtype=float)
    if CHOLMOD_AVAILABLE:
        try:
            factor = cholmod_cholesky(csc, mode="simplicial")
        except CholmodNotPositiveDefiniteError as e:
            raise WeightNotSPDError(f"CHOLMOD: {e}", provenance="weighted_space")
        return CholeskyFactor(lower=sp.csc_matrix(factor.L()), perm=np.asarray(factor.P()), backend="cholmod")
    return _superlu_cholesky(csc)


def spd_solver(matrix: sp.spmatrix) -> Callable[[np.ndarray], np.ndarray]:
    """Return a cached direct solver x = matrix^{-1} b for a sparse SPD matrix."""
    csc = sp.csc_matrix(matrix, dtype=float)
    if CHOLMOD_AVAILABLE:
        try:
            factor = cholmod_cholesky(csc)
        except CholmodNotPositiveDefiniteError as e:
            raise WeightNotSPDError(f"CHOLMOD: {e}", provenance="weighted_space")

        def solve_cholmod(b: np.ndarray) -> np.ndarray:
            return np.asarray(factor(b))

        return solve_cholmod

    try:
        lu = spla.splu(csc, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as e:
        raise WeightNotSPDError(f"sparse factorization failed: {e}", provenance="weighted_space")

    def solve_superlu(b: np.ndarray) -> np.ndarray:
        return lu.solve(np.asarray(b, dtype=float))

    return solve_superlu


# ---- Weight operator ----
@dataclass(frozen=True, eq=False)
class WeightOperator:
    """SPD bilinear form on R^m. ``matrix is None`` means the identity."""

    dim: int
    matrix: sp.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def identity(cls, m: int) -> WeightOperator:
        if m <= 0:
            raise ContractViolation(f"dimension must be positive, got {m}", provenance="weighted_space")
        return cls(dim=int(m))

    @classmethod
    def from_matrix(cls, matrix: sp.spmatrix | np.ndarray, *, check_spd: bool = False) -> WeightOperator:
        M = sp.csr_matrix(matrix, dtype=float)
        M.sum_duplicates()
        M.sort_indices()
        m, n = M.shape
        if m != n or m == 0:
            raise ContractViolation(f"weight matrix must be square and nonempty, got {M.shape}", provenance="weighted_space")
        scale = abs(M).max()
        asym = abs(M - M.T).max() if M.nnz else 0.0
        if scale == 0.0 or asym > SYMMETRY_RTOL * scale:
            raise WeightNotSPDError(
                f"weight matrix is not symmetric (max asymmetry {asym:.3e}, scale {scale:.3e})", provenance="weighted_space"
            )
        op = cls(dim=m, matrix=M)
        if check_spd:
            _ = op.cholesky
        return op

    @property
    def kind(self) -> str:
        return "identity" if self.matrix is None else "explicit-SPD"

    @cached_property
    def cholesky(self) -> CholeskyFactor:
        if self.matrix is None:
            return CholeskyFactor(lower=sp.identity(self.dim, format="csc"), perm=np.arange(self.dim), backend="identity")
        return factorize_spd(self.matrix)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return M x for a vector or a column block."""
        if self.matrix is None:
            return np.asarray(x, dtype=float)
        return np.asarray(self.matrix @ x)

    def as_dense(self) -> np.ndarray:
        if self.matrix is None:
            return np.eye(self.dim)
        return self.matrix.toarray()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        if self.matrix is None:
            h.update(f"identity:{self.dim}".encode())
        else:
            h.update(f"spd:{self.dim}:".encode())
            h.update(np.ascontiguousarray(self.matrix.indptr, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(self.matrix.indices, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(self.matrix.data, dtype=np.float64).tobytes())
        return h.hexdigest()


def _check_rows(arr: np.ndarray, wt: WeightOperator, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.shape[0] != wt.dim:
        raise ContractViolation(f"{what} has leading dimension {a.shape[0]}, weight has dim {wt.dim}", provenance="weighted_space")
    return a


# ---- Operations ----
def weighted_inner(x: np.ndarray, y: np.ndarray, wt: WeightOperator) -> float:
    """Return (x, y)_M = y^T M x."""
    xv = _check_rows(x, wt, "x")
    yv = _check_rows(y, wt, "y")
    if xv.ndim != 1 or yv.ndim != 1:
        raise ContractViolation("weighted_inner expects vectors", provenance="weighted_space")
    return float(yv @ wt.apply(xv))


def weighted_norm(x: np.ndarray, wt: WeightOperator) -> float:
    # clipped: roundoff can make tiny squared norms slightly negative
    return float(np.sqrt(max(weighted_inner(x, x, wt), 0.0)))


def m_orthonormality_defect(V: np.ndarray, wt: WeightOperator) -> float:
    """Max-entry magnitude of V^T M V - I."""
    Vm = _check_rows(V, wt, "V")
    if Vm.ndim == 1:
        Vm = Vm[:, None]
    s = Vm.shape[1]
    if s > wt.dim:
        raise ContractViolation(f"{s} columns cannot be M-orthonormal in dimension {wt.dim}", provenance="weighted_space")
    if s == 0:
        return 0.0
    gram = Vm.T @ wt.apply(Vm)
    return float(np.max(np.abs(gram - np.eye(s))))


def hs_norm_sq(U: np.ndarray, wt: WeightOperator) -> float:
    """Squared Hilbert-Schmidt norm: sum of squared M-norms of the columns."""
    Um = _check_rows(U, wt, "U")
    if Um.ndim == 1:
        Um = Um[:, None]
    return float(np.sum(Um * wt.apply(Um)))


@dataclass(frozen=True)
class WeightedFactorization:
    """Core M-weighted SVD U = V diag(sigma) W^T."""

    V: np.ndarray
    sigma: np.ndarray
    W: np.ndarray
    weight: WeightOperator = field(repr=False)
    tol_o: float = 1e-10

    @property
    def rank(self) -> int:
        return int(self.sigma.size)

    def reconstruct(self) -> np.ndarray:
        return (self.V * self.sigma) @ self.W.T

    def defects(self) -> dict[str, float]:
        s = self.rank
        sig = self.sigma
        return {
            "v_orthonormality": m_orthonormality_defect(self.V, self.weight),
            "w_orthonormality": float(np.max(np.abs(self.W.T @ self.W - np.eye(s)))) if s else 0.0,
            "sigma_min": float(sig.min()) if s else 0.0,
            "sigma_increase": float(np.max(np.diff(sig))) if s > 1 else 0.0,
        }

    def satisfies_invariants(self) -> bool:
        d = self.defects()
        return (
            d["v_orthonormality"] <= self.tol_o
            and d["w_orthonormality"] <= self.tol_o
            and d["sigma_min"] > 0.0
            and d["sigma_increase"] <= 0.0
        )


def orient_columns(V: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip singular-vector pairs so the first nonzero entry of each W column is nonnegative."""
    V = V.copy()
    W = W.copy()
    for k in range(W.shape[1]):
        col = W[:, k]
        big = np.abs(col).max() if col.size else 0.0
        nz = np.flatnonzero(np.abs(col) > 1e-12 * big) if big > 0 else np.array([], dtype=int)
        if nz.size and col[nz[0]] < 0:
            W[:, k] = -col
            V[:, k] = -V[:, k]
    return V, W


def core_weighted_svd(U: np.ndarray, wt: WeightOperator, *, tol_o: float = 1e-10) -> WeightedFactorization:
    """Batch core M-weighted SVD via the Cholesky isometry.

    Factor M = G G^T, take the thin SVD G^T U = V~ S W^T and return V = G^{-T} V~.
    Singular values below ``CORE_SV_RTOL * sigma_1`` are dropped.
    """
    Um = _check_rows(U, wt, "U")
    if Um.ndim == 1:
        Um = Um[:, None]
    if not np.all(np.isfinite(Um)):
        raise ContractViolation("U has non-finite entries", provenance="weighted_space")
    if not np.any(Um):
        raise EmptyStreamError("core SVD of the zero matrix is undefined", provenance="weighted_space")
    factor = wt.cholesky
    Y = Um if wt.matrix is None else factor.gt_apply(Um)
    Vt, s, Wt = scipy.linalg.svd(Y, full_matrices=False, lapack_driver="gesdd")
    keep = s > CORE_SV_RTOL * s[0]
    Vt, s, W = Vt[:, keep], s[keep], Wt[keep].T
    V = Vt if wt.matrix is None else factor.gt_solve(Vt)
    if V.ndim == 1:
        V = V[:, None]
    V, W = orient_columns(V, W)
    return WeightedFactorization(V=V, sigma=s, W=W, weight=wt, tol_o=tol_o)


# ---- Matrix Market I/O ----
def write_weight_mtx(path: str | Path, wt: WeightOperator) -> None:
    """Write the weight matrix in Matrix Market coordinate format."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    M = sp.identity(wt.dim, format="coo") if wt.matrix is None else wt.matrix.tocoo()
    scipy.io.mmwrite(str(path), M, comment="ipod-assim weight", field="real", precision=17, symmetry="general")
    logger.info("Wrote weight matrix: %s (m=%d, nnz=%d)", path, wt.dim, M.nnz)


def read_weight_mtx(path: str | Path) -> WeightOperator:
    M = scipy.io.mmread(str(path))
    return WeightOperator.from_matrix(sp.csr_matrix(M))


def write_snapshots_mtx(path: str | Path, U: np.ndarray) -> None:
    """Dump a snapshot block (columns = snapshots) in coordinate format."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Um = np.asarray(U, dtype=float)
    if Um.ndim == 1:
        Um = Um[:, None]
    scipy.io.mmwrite(str(path), sp.coo_matrix(Um), comment="ipod-assim snapshots", field="real", precision=17)
    logger.info("Wrote snapshot block: %s (%d x %d)", path, Um.shape[0], Um.shape[1])


def read_snapshots_mtx(path: str | Path) -> np.ndarray:
    M = scipy.io.mmread(str(path))
    return M.toarray() if sp.issparse(M) else np.asarray(M)
