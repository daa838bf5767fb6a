"""Tests for the weighted inner product, SPD factorization and batch weighted SVD."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from ipod_assimilation.errors import ContractViolation, EmptyStreamError, WeightNotSPDError
from ipod_assimilation.pde_constraints import assemble_interface_problem, assemble_p1_1d
from ipod_assimilation.weighted_space import (
    WeightOperator,
    core_weighted_svd,
    hs_norm_sq,
    m_orthonormality_defect,
    read_snapshots_mtx,
    read_weight_mtx,
    weighted_inner,
    weighted_norm,
    write_snapshots_mtx,
    write_weight_mtx,
)


def _mass_1d(n_cells: int = 30) -> WeightOperator:
    mass, _ = assemble_p1_1d(n_cells)
    return WeightOperator.from_matrix(mass[1:-1, 1:-1])


def test_weighted_inner_examples():
    assert weighted_inner(np.array([1.0, 0.0]), np.array([0.0, 1.0]), WeightOperator.identity(2)) == 0.0
    wt = WeightOperator.from_matrix(np.diag([2.0, 3.0]))
    assert weighted_inner(np.ones(2), np.ones(2), wt) == pytest.approx(5.0)


def test_weighted_inner_ones_on_full_mass_is_domain_length():
    mass, _ = assemble_p1_1d(10)
    wt = WeightOperator.from_matrix(mass)
    ones = np.ones(mass.shape[0])
    assert weighted_inner(ones, ones, wt) == pytest.approx(1.0, abs=1e-12)
    assert weighted_norm(ones, wt) == pytest.approx(1.0, abs=1e-12)


def test_weighted_inner_dimension_mismatch():
    with pytest.raises(ContractViolation):
        weighted_inner(np.ones(3), np.ones(2), WeightOperator.identity(2))


def test_orthonormality_defect_examples(rng):
    wt = WeightOperator.identity(5)
    V = np.eye(5)[:, :3]
    assert m_orthonormality_defect(V, wt) == 0.0
    V[:, 1] *= 2.0
    assert m_orthonormality_defect(V, wt) == pytest.approx(3.0)

    mass_wt = _mass_1d(21)
    fac = core_weighted_svd(rng.standard_normal((20, 8)), mass_wt)
    assert m_orthonormality_defect(fac.V, mass_wt) <= 1e-12


def test_orthonormality_defect_too_many_columns():
    with pytest.raises(ContractViolation):
        m_orthonormality_defect(np.ones((2, 3)), WeightOperator.identity(2))


def test_hs_norm_sq_standard_basis():
    assert hs_norm_sq(np.eye(3)[:, :2], WeightOperator.identity(3)) == pytest.approx(2.0)


def test_from_matrix_rejects_asymmetric():
    with pytest.raises(WeightNotSPDError):
        WeightOperator.from_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_from_matrix_rejects_indefinite():
    with pytest.raises(WeightNotSPDError):
        WeightOperator.from_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]), check_spd=True)


@pytest.mark.parametrize("n_cells", [8, 40])
def test_cholesky_factor_reproduces_mass_1d(n_cells):
    wt = _mass_1d(n_cells)
    G = wt.cholesky.as_dense()
    np.testing.assert_allclose(G @ G.T, wt.as_dense(), atol=1e-14)


def test_cholesky_factor_on_interface_mass_and_solve(rng):
    problem = assemble_interface_problem(h=0.25, tau=0.1, T=0.1)
    wt = problem.mass_weight
    factor = wt.cholesky
    G = factor.as_dense()
    np.testing.assert_allclose(G @ G.T, wt.as_dense(), atol=1e-13)
    U = rng.standard_normal((wt.dim, 4))
    np.testing.assert_allclose(factor.gt_solve(factor.gt_apply(U)), U, rtol=1e-10, atol=1e-10)


def test_core_svd_identity_matrix():
    fac = core_weighted_svd(np.eye(3), WeightOperator.identity(3))
    np.testing.assert_allclose(fac.sigma, np.ones(3))
    assert fac.satisfies_invariants()


def test_core_svd_single_column_weighted():
    wt = WeightOperator.from_matrix(np.diag([4.0, 1.0]))
    fac = core_weighted_svd(np.array([[1.0], [0.0]]), wt)
    np.testing.assert_allclose(fac.sigma, [2.0])
    np.testing.assert_allclose(fac.V[:, 0], [0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(fac.W, [[1.0]])


def test_core_svd_matches_dense_svd(rng):
    U = rng.standard_normal((12, 7))
    fac = core_weighted_svd(U, WeightOperator.identity(12))
    V_ref, s_ref, Wt_ref = np.linalg.svd(U, full_matrices=False)
    np.testing.assert_allclose(fac.sigma, s_ref, rtol=1e-12)
    # equal up to the sign of each singular-vector pair
    signs = np.sign(np.sum(fac.W * Wt_ref.T, axis=0))
    np.testing.assert_allclose(fac.V, V_ref * signs, atol=1e-10)
    np.testing.assert_allclose(fac.reconstruct(), U, atol=1e-12)


def test_core_svd_weighted_reconstructs(rng):
    wt = _mass_1d(25)
    U = rng.standard_normal((wt.dim, 6))
    fac = core_weighted_svd(U, wt)
    assert fac.satisfies_invariants()
    np.testing.assert_allclose(fac.reconstruct(), U, atol=1e-10)
    # first nonzero entry of every right singular vector is nonnegative
    for k in range(fac.rank):
        col = fac.W[:, k]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0


def test_core_svd_zero_matrix():
    with pytest.raises(EmptyStreamError):
        core_weighted_svd(np.zeros((4, 2)), WeightOperator.identity(4))


def test_fingerprint_tracks_matrix():
    a = _mass_1d(10)
    b = _mass_1d(10)
    c = _mass_1d(11)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert WeightOperator.identity(9).fingerprint() != a.fingerprint()


def test_matrix_market_files(tmp_path, rng):
    wt = _mass_1d(12)
    write_weight_mtx(tmp_path / "mass.mtx", wt)
    loaded = read_weight_mtx(tmp_path / "mass.mtx")
    assert abs(loaded.matrix - wt.matrix).max() == 0.0

    U = rng.standard_normal((wt.dim, 3))
    write_snapshots_mtx(tmp_path / "snaps" / "u.mtx", U)
    np.testing.assert_array_equal(read_snapshots_mtx(tmp_path / "snaps" / "u.mtx"), U)


def test_identity_weight_kind():
    wt = WeightOperator.identity(4)
    assert wt.kind == "identity"
    assert _mass_1d(5).kind == "explicit-SPD"
    assert sp.issparse(_mass_1d(5).matrix)
    with pytest.raises(ContractViolation):
        WeightOperator.identity(0)


def _random_spd(rng: np.random.Generator, m: int) -> WeightOperator:
    B = rng.standard_normal((m, m))
    A = B @ B.T + m * np.eye(m)
    return WeightOperator.from_matrix(0.5 * (A + A.T), check_spd=True)


@pytest.mark.parametrize("seed", range(10))
def test_weighted_space_identities_on_random_spd(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 40))
    wt = _random_spd(rng, m)
    x, y = rng.standard_normal(m), rng.standard_normal(m)
    assert weighted_inner(x, y, wt) == pytest.approx(weighted_inner(y, x, wt), rel=1e-12, abs=1e-12)
    assert weighted_inner(x, x, wt) > 0.0

    U = rng.standard_normal((m, int(rng.integers(1, 2 * m))))
    c = rng.standard_normal(m)
    appended = hs_norm_sq(np.column_stack([U, c]), wt)
    assert appended == pytest.approx(hs_norm_sq(U, wt) + weighted_norm(c, wt) ** 2, rel=1e-12)

    ref = core_weighted_svd(U, wt)
    assert hs_norm_sq(U, wt) == pytest.approx(float(np.sum(ref.sigma**2)), rel=1e-10)
    assert sum(weighted_norm(U[:, j], wt) ** 2 for j in range(U.shape[1])) == pytest.approx(hs_norm_sq(U, wt), rel=1e-12)
