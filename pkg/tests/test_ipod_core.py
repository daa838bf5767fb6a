"""Tests for the streaming incremental POD and its error ledger."""
from __future__ import annotations

import numpy as np
import pytest

from ipod_assimilation.config import from_mapping
from ipod_assimilation.errors import (
    ArtifactError,
    ContractViolation,
    EmptyStreamError,
    NotFinalizedError,
    NumericalDegradationError,
)
from ipod_assimilation.ipod_core import (
    IpodTolerances,
    energy_ratio,
    error_bound,
    export_basis_mtx,
    ipod_compress,
    ipod_finalize,
    ipod_init,
    ipod_update,
    load_state,
    reconstruct,
    reconstruction_error,
    retained_storage,
    save_state,
    storage_fraction,
)
from ipod_assimilation.experiments import run_ipod_bench
from ipod_assimilation.pde_constraints import assemble_p1_1d
from ipod_assimilation.weighted_space import (
    WeightOperator,
    core_weighted_svd,
    hs_norm_sq,
    m_orthonormality_defect,
    read_snapshots_mtx,
)

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])
LOSSLESS = IpodTolerances(tol_p=0.0, tol_sv=0.0)


def _mass_weight(m: int) -> WeightOperator:
    mass, _ = assemble_p1_1d(m + 1)
    return WeightOperator.from_matrix(mass[1:-1, 1:-1])


def _low_rank_stream(rng: np.random.Generator, m: int, n: int, rank: int, noise: float) -> np.ndarray:
    left = rng.standard_normal((m, rank))
    right = rng.standard_normal((rank, n)) * (0.5 ** np.arange(rank))[:, None]
    return left @ right + noise * rng.standard_normal((m, n))


def test_init_identity():
    state = ipod_init(np.array([3.0, 0.0]), WeightOperator.identity(2))
    np.testing.assert_allclose(state.V, [[1.0], [0.0]])
    np.testing.assert_allclose(state.sigma, [3.0])
    np.testing.assert_allclose(state.W, [[1.0]])
    assert error_bound(state) == 0.0


def test_init_weighted():
    state = ipod_init(E1, WeightOperator.from_matrix(np.diag([4.0, 1.0])))
    np.testing.assert_allclose(state.sigma, [2.0])
    np.testing.assert_allclose(state.V[:, 0], [0.5, 0.0])


def test_init_zero_snapshot():
    with pytest.raises(EmptyStreamError):
        ipod_init(np.zeros(2), WeightOperator.identity(2))


def test_update_shape_mismatch():
    state = ipod_init(E1, WeightOperator.identity(2))
    with pytest.raises(ContractViolation):
        ipod_update(state, np.ones(3))


def test_duplicate_snapshot_is_buffered():
    state = ipod_init(E1, WeightOperator.identity(2), IpodTolerances(tol_p=1e-10, tol_sv=1e-10))
    ipod_update(state, E1)
    assert state.d == 1
    assert state.rank == 1
    assert state.e_p == 0.0
    assert state.last_event.kind == "buffered"


def test_orthogonal_snapshot_is_exact_update():
    state = ipod_init(E1, WeightOperator.identity(2), LOSSLESS)
    ipod_update(state, E2)
    assert state.last_event.kind == "exact"
    ipod_finalize(state)
    np.testing.assert_allclose(state.sigma, [1.0, 1.0])
    np.testing.assert_allclose((state.V * state.sigma) @ state.W.T, np.eye(2), atol=1e-15)


def test_p_truncation_error_is_exactly_p():
    delta = 1e-9
    U = np.column_stack([E1, E1 + delta * E2])
    state = ipod_compress(U.T, WeightOperator.identity(2), IpodTolerances(tol_p=1e-6, tol_sv=1e-6))
    assert state.n_truncated_p == 1
    assert error_bound(state) == pytest.approx(delta, rel=1e-6)
    assert reconstruction_error(state, U) == pytest.approx(delta, rel=1e-6)


def test_sv_truncation_drops_small_singular_value():
    U = np.column_stack([E1, 1e-9 * E2])
    state = ipod_compress(U.T, WeightOperator.identity(2), IpodTolerances(tol_p=0.0, tol_sv=1e-6))
    assert state.rank == 1
    assert state.n_truncated_sv == 1
    assert state.e_sv == pytest.approx(1e-9, rel=1e-9)
    assert reconstruction_error(state, U) == pytest.approx(1e-9, rel=1e-6)


def test_finalize_after_buffered_duplicates():
    state = ipod_init(E1, WeightOperator.identity(2), IpodTolerances(tol_p=1e-10, tol_sv=1e-10))
    ipod_update(state, E1)
    ipod_update(state, E1)
    ipod_finalize(state)
    assert state.W.shape == (3, 1)
    np.testing.assert_allclose(np.abs(state.W[:, 0]), np.full(3, 1.0 / np.sqrt(3.0)))
    np.testing.assert_allclose(state.sigma, [np.sqrt(3.0)])


def test_finalize_without_pending_is_noop():
    state = ipod_init(E1, WeightOperator.identity(2))
    V, sigma, W = state.V.copy(), state.sigma.copy(), state.W.copy()
    ipod_finalize(state)
    np.testing.assert_array_equal(state.V, V)
    np.testing.assert_array_equal(state.sigma, sigma)
    np.testing.assert_array_equal(state.W, W)


def test_pending_block_flushed_before_growth():
    state = ipod_init(E1, WeightOperator.identity(2), IpodTolerances(tol_p=1e-10, tol_sv=1e-10))
    ipod_update(state, E1)
    ipod_update(state, E2)
    assert state.last_event.flushed == 1
    ipod_finalize(state)
    np.testing.assert_allclose(state.sigma, [np.sqrt(2.0), 1.0])
    U = np.column_stack([E1, E1, E2])
    np.testing.assert_allclose((state.V * state.sigma) @ state.W.T, U, atol=1e-14)


def test_energy_ratio_examples():
    state = ipod_compress([E1, E2], WeightOperator.identity(2), LOSSLESS)
    assert energy_ratio(state) == pytest.approx(1.0, abs=1e-12)

    delta = 1e-3
    state = ipod_init(E1, WeightOperator.identity(2), IpodTolerances(tol_p=1e-2, tol_sv=1e-2))
    ipod_update(state, delta * E2)
    assert energy_ratio(state) == pytest.approx(np.sqrt(1.0 / (1.0 + delta**2)), rel=1e-12)


def test_reconstruct_single_snapshot_unit_tau():
    u = np.array([0.3, -1.2, 2.0])
    state = ipod_compress([u], WeightOperator.identity(3))
    np.testing.assert_allclose(reconstruct(state, 1), u, rtol=1e-15)


def test_reconstruct_scaled_stream(rng):
    tau = 0.01
    wt = _mass_weight(15)
    U = rng.standard_normal((wt.dim, 6))
    state = ipod_compress((np.sqrt(tau) * U).T, wt, LOSSLESS)
    for j in range(1, 7):
        np.testing.assert_allclose(reconstruct(state, j, tau), U[:, j - 1], rtol=1e-10, atol=1e-10)


def test_reconstruct_preconditions():
    state = ipod_init(E1, WeightOperator.identity(2), IpodTolerances(tol_p=1e-10))
    ipod_update(state, E1)
    with pytest.raises(NotFinalizedError):
        reconstruct(state, 1)
    ipod_finalize(state)
    with pytest.raises(ContractViolation):
        reconstruct(state, 3)
    with pytest.raises(ContractViolation):
        reconstruct(state, 1, tau=0.0)


def test_lossless_matches_batch_weighted_svd(rng):
    wt = _mass_weight(30)
    U = rng.standard_normal((wt.dim, 12))
    state = ipod_compress(U.T, wt, LOSSLESS)
    ref = core_weighted_svd(U, wt)
    hs = np.sqrt(hs_norm_sq(U, wt))
    assert reconstruction_error(state, U) <= 1e-10 * hs
    np.testing.assert_allclose(state.sigma, ref.sigma, rtol=1e-10)
    assert m_orthonormality_defect(state.V, wt) <= 1e-10
    assert error_bound(state) == 0.0


@pytest.mark.parametrize("tol", [1e-8, 1e-6, 1e-4])
def test_ledger_bounds_exact_error(rng, tol):
    wt = _mass_weight(40)
    U = _low_rank_stream(rng, wt.dim, 30, rank=5, noise=1e-7)
    state = ipod_compress(U.T, wt, IpodTolerances.uniform(tol))
    assert reconstruction_error(state, U) <= error_bound(state) * (1.0 + 1e-9) + 1e-13
    assert state.rank <= 30
    assert m_orthonormality_defect(state.V, wt) <= 1e-10


def test_truncation_keeps_rank_small(rng):
    wt = WeightOperator.identity(50)
    U = _low_rank_stream(rng, 50, 40, rank=4, noise=0.0)
    state = ipod_compress(U.T, wt, IpodTolerances.uniform(1e-8))
    assert state.rank == 4
    assert retained_storage(state) == (50, 4)
    assert storage_fraction(state) == pytest.approx(0.1)


def test_interlacing_on_exact_updates(rng):
    wt = _mass_weight(20)
    state = ipod_init(rng.standard_normal(wt.dim), wt, LOSSLESS)
    for _ in range(8):
        ipod_update(state, rng.standard_normal(wt.dim))
        event = state.last_event
        assert event.kind == "exact"
        assert event.interlacing_violation() <= 1e-12 * event.mu[0]


def test_sigma_stays_sorted_and_positive(rng):
    wt = _mass_weight(25)
    U = _low_rank_stream(rng, wt.dim, 20, rank=6, noise=1e-5)
    state = ipod_compress(U.T, wt, IpodTolerances.uniform(1e-6))
    assert np.all(state.sigma > 0)
    assert np.all(np.diff(state.sigma) <= 0)


def test_reorthogonalization_cap(rng):
    wt = _mass_weight(20)
    state = ipod_init(rng.standard_normal(wt.dim), wt, IpodTolerances(tol_p=0.0, tol_sv=0.0, tol_o=1e-300, reorth_cap=1))
    with pytest.raises(NumericalDegradationError):
        for _ in range(5):
            ipod_update(state, rng.standard_normal(wt.dim))


def test_empty_stream():
    with pytest.raises(EmptyStreamError):
        ipod_compress([], WeightOperator.identity(2))


def test_tolerances_validation():
    with pytest.raises(ContractViolation):
        IpodTolerances(tol_p=-1.0)
    with pytest.raises(ContractViolation):
        IpodTolerances(tol_o=0.0)
    with pytest.raises(ContractViolation):
        IpodTolerances(reorth_cap=0)


def test_save_and_load_state(tmp_path, rng):
    wt = _mass_weight(12)
    U = rng.standard_normal((wt.dim, 5))
    state = ipod_compress(U.T, wt, IpodTolerances.uniform(1e-9))
    save_state(tmp_path / "state.npz", state)
    loaded = load_state(tmp_path / "state.npz", wt)
    np.testing.assert_array_equal(loaded.V, state.V)
    np.testing.assert_array_equal(loaded.sigma, state.sigma)
    assert loaded.count == state.count
    assert error_bound(loaded) == error_bound(state)
    np.testing.assert_allclose(reconstruct(loaded, 5), reconstruct(state, 5))

    with pytest.raises(ContractViolation):
        load_state(tmp_path / "state.npz", _mass_weight(13))
    with pytest.raises(ArtifactError):
        load_state(tmp_path / "missing.npz", wt)

    export_basis_mtx(tmp_path / "basis.mtx", state)
    np.testing.assert_array_equal(read_snapshots_mtx(tmp_path / "basis.mtx"), state.V)


@pytest.mark.parametrize("m", [5, 20, 60])
@pytest.mark.parametrize("weight", ["identity", "mass"])
def test_lossless_stream_longer_than_dimension(rng, m, weight):
    wt = WeightOperator.identity(m) if weight == "identity" else _mass_weight(m)
    U = rng.standard_normal((m, 3 * m))
    state = ipod_compress(U.T, wt, LOSSLESS)
    assert state.rank == m
    assert state.n_truncated_p == 2 * m
    ref = core_weighted_svd(U, wt)
    np.testing.assert_allclose(state.sigma, ref.sigma, rtol=1e-10, atol=1e-10 * ref.sigma[0])
    assert reconstruction_error(state, U) <= 1e-10 * np.sqrt(hs_norm_sq(U, wt))


def test_full_rank_basis_buffers_every_further_snapshot(rng):
    wt = WeightOperator.identity(3)
    state = ipod_init(rng.standard_normal(3), wt, LOSSLESS)
    for _ in range(2):
        ipod_update(state, rng.standard_normal(3))
    assert state.rank == 3
    for _ in range(4):
        ipod_update(state, rng.standard_normal(3))
        assert state.last_event.kind == "buffered"
    assert state.d == 4


@pytest.mark.parametrize("weight", ["identity", "mass"])
@pytest.mark.parametrize("rank", [1, 3, 7])
def test_lossless_rank_deficient_stream_keeps_true_rank(rng, weight, rank):
    wt = WeightOperator.identity(40) if weight == "identity" else _mass_weight(40)
    U = rng.standard_normal((40, rank)) @ rng.standard_normal((rank, 60))
    state = ipod_compress(U.T, wt, LOSSLESS)
    ref = core_weighted_svd(U, wt)
    assert ref.rank == rank
    assert state.rank == rank
    assert retained_storage(state) == (40, rank)
    np.testing.assert_allclose(state.sigma, ref.sigma, rtol=1e-10)
    assert reconstruction_error(state, U) <= 1e-10 * np.sqrt(hs_norm_sq(U, wt))


def _random_stream(seed: int) -> tuple[WeightOperator, np.ndarray, int]:
    rng = np.random.default_rng([7, seed])
    m = int(rng.integers(4, 201))
    n = int(rng.integers(2, 301))
    wt = WeightOperator.identity(m) if seed % 2 else _mass_weight(m)
    full = min(m, n)
    rank = full if seed % 3 == 0 else int(rng.integers(1, full + 1))
    U = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    return wt, U, rank


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(200))
def test_lossless_random_streams_match_batch_svd(seed):
    wt, U, rank = _random_stream(seed)
    state = ipod_compress(U.T, wt, LOSSLESS)
    ref = core_weighted_svd(U, wt)
    assert state.rank == rank
    np.testing.assert_allclose(state.sigma, ref.sigma[:rank], rtol=1e-10, atol=1e-10 * ref.sigma[0])
    assert reconstruction_error(state, U) <= 1e-10 * np.sqrt(hs_norm_sq(U, wt))
    assert m_orthonormality_defect(state.V, wt) <= 1e-10


def test_orthogonality_after_many_rotating_updates(rng):
    wt = WeightOperator.identity(200)
    U = _low_rank_stream(rng, 200, 600, rank=10, noise=1e-4)
    state = ipod_init(U[:, 0], wt, IpodTolerances(tol_p=1e-12, tol_sv=1e-2))
    rotated = 0
    for j in range(1, U.shape[1]):
        ipod_update(state, U[:, j])
        rotated += state.last_event.kind != "buffered"
    ipod_finalize(state)
    assert rotated >= 500
    assert state.n_truncated_sv > 0
    assert m_orthonormality_defect(state.V, wt) <= 1e-10
    assert reconstruction_error(state, U) <= error_bound(state) * (1.0 + 1e-9) + 1e-13 * np.sqrt(hs_norm_sq(U, wt))


def test_compression_is_deterministic(rng):
    wt = _mass_weight(50)
    U = _low_rank_stream(rng, wt.dim, 80, rank=6, noise=1e-6)
    a = ipod_compress(U.T, wt, IpodTolerances.uniform(1e-7))
    b = ipod_compress(U.T, wt, IpodTolerances.uniform(1e-7))
    np.testing.assert_array_equal(a.V, b.V)
    np.testing.assert_array_equal(a.sigma, b.sigma)
    np.testing.assert_array_equal(a.W, b.W)
    assert (a.e_p, a.e_sv, a.n_truncated_p, a.n_truncated_sv) == (b.e_p, b.e_sv, b.n_truncated_p, b.n_truncated_sv)


def _eager_ipod(U: np.ndarray, wt: WeightOperator, tol_p: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Same update rule with every small-residual snapshot rotated into V immediately."""
    u = U[:, 0]
    nrm = np.sqrt(u @ wt.apply(u))
    V, sigma, W = (u / nrm)[:, None], np.array([nrm]), np.ones((1, 1))
    for j in range(1, U.shape[1]):
        u = U[:, j]
        b = V.T @ wt.apply(u)
        e = u - V @ b
        p = np.sqrt(max(e @ wt.apply(e), 0.0))
        l = sigma.size
        Wext = np.zeros((W.shape[0] + 1, l + 1))
        Wext[:-1, :l] = W
        Wext[-1, l] = 1.0
        if p < tol_p:
            Vq, sigma, Wqt = np.linalg.svd(np.column_stack([np.diag(sigma), b]), full_matrices=False)
            V = V @ Vq
            W = Wext @ Wqt.T
        else:
            Q = np.zeros((l + 1, l + 1))
            Q[:l, :l] = np.diag(sigma)
            Q[:l, l] = b
            Q[l, l] = p
            Vq, sigma, Wqt = np.linalg.svd(Q)
            V = np.column_stack([V, e / p]) @ Vq
            W = Wext @ Wqt.T
    return V, sigma, W


def test_deferred_rotation_matches_eager_rotation(rng):
    wt = _mass_weight(30)
    U = _low_rank_stream(rng, wt.dim, 40, rank=4, noise=1e-9)
    for j in (9, 17, 31):
        U[:, j] = rng.standard_normal(wt.dim)
    state = ipod_compress(U.T, wt, IpodTolerances(tol_p=1e-6, tol_sv=0.0))
    assert state.n_truncated_p > 20
    V, sigma, W = _eager_ipod(U, wt, 1e-6)
    np.testing.assert_allclose(state.sigma, sigma, rtol=1e-10, atol=1e-12 * sigma[0])
    scale = np.sqrt(hs_norm_sq(U, wt))
    np.testing.assert_allclose((state.V * state.sigma) @ state.W.T, (V * sigma) @ W.T, atol=1e-10 * scale)


def test_interlacing_on_truncating_updates(rng):
    wt = _mass_weight(30)
    U = _low_rank_stream(rng, wt.dim, 60, rank=4, noise=1e-3)
    state = ipod_init(U[:, 0], wt, IpodTolerances(tol_p=1e-4, tol_sv=1e-2))
    kinds = set()
    for j in range(1, U.shape[1]):
        # every fourth snapshot lies in the current span and must be buffered
        u = state.V @ rng.standard_normal(state.rank) if j % 4 == 0 else U[:, j]
        ipod_update(state, u)
        event = state.last_event
        kinds.add(event.kind)
        scale = event.mu[0] if event.mu.size else 1.0
        assert event.interlacing_violation() <= 1e-12 * scale
    assert {"exact", "sv-truncated", "buffered"} <= kinds


@pytest.mark.parametrize("tol", [1e-10, 1e-8, 1e-6])
def test_ledger_is_sharp_on_bench_defaults(tmp_path, tol):
    cfg = from_mapping({"name": "sharp", "kind": "ipod-bench", "bench": {"tolerances": [tol]}})
    summary = run_ipod_bench(cfg, tmp_path)
    assert summary["streams"] == cfg.section("bench").n_streams
    assert 1.0 - 1e-9 <= summary["median_ratio"][f"{tol:g}"] <= 10.0
