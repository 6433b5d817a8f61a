import numpy as np
import pytest

from txmsum import (SumConfig, ThresholdConfig, generate, randomized_svd,
                    select_rank, sure_hard_threshold, svd_thin, to_matrix,
                    truncate)

from conftest import voronoi_phantom


def check_decomposition(dec, a=None):
    assert np.max(np.abs(dec.u.T @ dec.u - np.eye(dec.rank))) <= 1e-8
    assert np.max(np.abs(dec.v.T @ dec.v - np.eye(dec.rank))) <= 1e-8
    assert np.all(np.diff(dec.s) <= 1e-12)
    assert np.all(dec.s >= 0)
    if a is not None:
        recon = (dec.u * dec.s) @ dec.v.T
        assert np.linalg.norm(recon - a) <= 1e-6 * np.linalg.norm(a)


def hard_threshold_recon(y, delta):
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    keep = s > delta
    return (u[:, keep] * s[keep]) @ vt[keep]


# --- svd_thin ----------------------------------------------------------------

def test_rank_one_matrix():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(12)
    b = rng.standard_normal(5)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    dec = svd_thin(3.7 * np.outer(a, b))
    assert dec.s[0] == pytest.approx(3.7, rel=1e-12)
    assert np.all(dec.s[1:] < 1e-12)
    # leading left factor proportional to a (up to the sign convention)
    cos = abs(dec.u[:, 0] @ a)
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_diagonal_matrix():
    dec = svd_thin(np.diag([5.0, 3.0, 1.0]))
    assert np.allclose(dec.s, [5.0, 3.0, 1.0])


def test_reconstruction_random():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20, 10))
    check_decomposition(svd_thin(a), a)


def test_tall_matrix_uses_consistent_contract():
    # tall enough to take the Gram path; same invariants must hold
    rng = np.random.default_rng(4)
    a = rng.standard_normal((400, 12)) @ np.diag(10.0 ** -np.arange(12))
    check_decomposition(svd_thin(a), a)


def test_rank_deficient_tall_matrix():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((300, 3)) @ rng.standard_normal((3, 10))
    dec = svd_thin(a)
    check_decomposition(dec, a)
    # Gram-route zeros sit at the sqrt(eps) noise floor
    assert np.sum(dec.s > 1e-5 * dec.s[0]) == 3


def test_sign_convention_deterministic():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((30, 8))
    d1 = svd_thin(a)
    d2 = svd_thin(a.copy())
    assert np.array_equal(d1.u, d2.u)
    assert np.array_equal(d1.v, d2.v)
    idx = np.argmax(np.abs(d1.u), axis=0)
    assert np.all(d1.u[idx, np.arange(d1.rank)] > 0)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        svd_thin(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_rotation_invariance_of_spectrum():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((40, 12))
    q, _ = np.linalg.qr(rng.standard_normal((40, 40)))
    s1 = svd_thin(a).s
    s2 = svd_thin(q @ a).s
    assert np.max(np.abs(s1 - s2)) <= 1e-8 * s1[0]
    r1 = select_rank(svd_thin(a), 0.5)
    r2 = select_rank(svd_thin(q @ a), 0.5)
    assert r1.selected_k == r2.selected_k


# --- truncate ----------------------------------------------------------------

def test_truncate_full_rank_is_identity():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((15, 6))
    dec = svd_thin(a)
    assert np.linalg.norm(truncate(dec, dec.rank) - a) <= 1e-6 * np.linalg.norm(a)


def test_truncate_diagonal():
    dec = svd_thin(np.diag([5.0, 3.0, 1.0]))
    assert np.allclose(truncate(dec, 1), np.diag([5.0, 0.0, 0.0]), atol=1e-12)


def test_truncate_rank_bounds():
    dec = svd_thin(np.eye(3))
    with pytest.raises(ValueError):
        truncate(dec, 0)
    with pytest.raises(ValueError):
        truncate(dec, 4)


def test_truncate_at_true_rank_beats_over_and_under():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((60, 5)) @ (rng.standard_normal((5, 20)) * 4.0)
    y = x + 0.5 * rng.standard_normal(x.shape)
    dec = svd_thin(y)
    err = {k: np.linalg.norm(truncate(dec, k) - x) for k in (1, 5, dec.rank)}
    assert err[5] < err[1]
    assert err[5] < err[dec.rank]


# --- sure_hard_threshold -------------------------------------------------------

def test_sure_all_below_threshold():
    s = np.array([3.0, 2.0, 1.0])
    m, n, sigma = 8, 6, 0.7
    val = sure_hard_threshold(s, m, n, sigma, delta=10.0)
    assert val == pytest.approx(-m * n * sigma**2 + np.sum(s**2), rel=1e-12)


def test_sure_sigma_zero_rejected():
    with pytest.raises(ValueError):
        sure_hard_threshold(np.array([1.0]), 4, 3, 0.0, 0.5)


def test_sure_monte_carlo_unbiased_8x6():
    # deltas cover the keep-0 / keep-1 / keep-2 regimes; the keep-all regime
    # has too small an MSE for a 200-draw oracle to resolve at 2%
    rng = np.random.default_rng(100)
    m, n = 8, 6
    x = (rng.standard_normal((m, 3)) * [10.0, 6.0, 3.5]) @ rng.standard_normal((3, n))
    sigma = 0.3
    s_clean = np.linalg.svd(x, compute_uv=False)
    deltas = [1.2 * s_clean[0], 0.5 * (s_clean[0] + s_clean[1]),
              0.5 * (s_clean[1] + s_clean[2])]
    draws = 200
    mse = np.zeros(3)
    sure = np.zeros(3)
    for _ in range(draws):
        y = x + sigma * rng.standard_normal((m, n))
        s = np.linalg.svd(y, compute_uv=False)
        for i, d in enumerate(deltas):
            mse[i] += np.sum((hard_threshold_recon(y, d) - x) ** 2)
            sure[i] += sure_hard_threshold(s, m, n, sigma, d)
    mse /= draws
    sure /= draws
    assert np.all(np.abs(sure - mse) <= 0.02 * mse)


def test_divergence_matches_finite_differences():
    rng = np.random.default_rng(12)
    m, n = 8, 6
    x = (rng.standard_normal((m, 3)) * [5.0, 3.0, 1.8]) @ rng.standard_normal((3, n))
    y = x + 0.3 * rng.standard_normal((m, n))
    s = np.linalg.svd(y, compute_uv=False)
    sigma = 0.3
    eps = 1e-4
    for delta in (0.5 * (s[2] + s[3]), 0.5 * (s[0] + s[1]), 0.5 * s[-1]):
        div_fd = 0.0
        for i in range(m):
            for j in range(n):
                yp = y.copy()
                yp[i, j] += eps
                ym = y.copy()
                ym[i, j] -= eps
                div_fd += (hard_threshold_recon(yp, delta)[i, j]
                           - hard_threshold_recon(ym, delta)[i, j]) / (2 * eps)
        # back the closed-form divergence out of the risk value
        keep = s > delta
        resid = np.sum(s[~keep] ** 2)
        val = sure_hard_threshold(s, m, n, sigma, delta)
        div_cf = (val + m * n * sigma**2 - resid) / (2 * sigma**2)
        assert abs(div_cf - div_fd) <= 1e-3 * abs(div_fd)


def test_sure_handles_tied_singular_values():
    s = np.array([5.0, 5.0, 5.0, 1.0, 1.0])
    val = sure_hard_threshold(s, 12, 5, 0.5, delta=2.0)
    assert np.isfinite(val)


# --- select_rank ----------------------------------------------------------------

def test_select_rank_clean_gap():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((40, 3)) @ (rng.standard_normal((3, 12)) * 5.0)
    rep = select_rank(svd_thin(a), sigma=1e-6)
    assert rep.selected_k == 3
    assert not rep.empty_subspace


def test_select_rank_huge_sigma_empty_subspace():
    rng = np.random.default_rng(14)
    a = rng.standard_normal((30, 8))
    dec = svd_thin(a)
    rep = select_rank(dec, sigma=10.0 * dec.s[0])
    assert rep.selected_k == 0
    assert rep.empty_subspace


def test_select_rank_matches_true_mse_argmin_on_phantom():
    spec = voronoi_phantom(size=128, frames=64, sigma=60.0, seed=2)
    noisy, truth = generate(spec)
    dec = svd_thin(to_matrix(noisy))
    rep = select_rank(dec, 60.0, ground_truth=to_matrix(truth.clean))
    i_sure = int(np.flatnonzero(rep.sure == rep.sure.min())[-1])
    i_mse = int(np.argmin(rep.true_mse))
    assert abs(i_sure - i_mse) <= 1


def test_select_rank_fixed_modes():
    rng = np.random.default_rng(15)
    dec = svd_thin(rng.standard_normal((20, 6)))
    rep = select_rank(dec, 0.0, ThresholdConfig.fixed_rank(4))
    assert rep.selected_k == 4
    rep = select_rank(dec, 0.0, ThresholdConfig.fixed_threshold(dec.s[2] * 1.0001))
    assert rep.selected_k == 2


def test_select_rank_sigma_zero_needs_fixed_mode():
    dec = svd_thin(np.eye(4))
    with pytest.raises(ValueError):
        select_rank(dec, 0.0, ThresholdConfig.sure_auto())


def test_report_invariants_and_json():
    rng = np.random.default_rng(16)
    a = rng.standard_normal((50, 10)) * 2.0
    rep = select_rank(svd_thin(a), sigma=1.0)
    assert rep.sure.min() == rep.sure[np.flatnonzero(rep.deltas == rep.selected_delta)[0]]
    assert rep.selected_k == int(np.sum(svd_thin(a).s > rep.selected_delta))
    d = rep.to_dict()
    assert set(d) >= {"delta", "sure", "selected_delta", "selected_k"}
    assert len(d["delta"]) == len(d["sure"])
    # residual term of the risk is non-decreasing in delta
    s = svd_thin(a).s
    resid = [np.sum(s[s <= dl] ** 2) for dl in rep.deltas]
    assert np.all(np.diff(resid) >= 0)


def test_grid_avoids_singular_values():
    rng = np.random.default_rng(17)
    dec = svd_thin(rng.standard_normal((30, 7)))
    rep = select_rank(dec, 0.5)
    for delta in rep.deltas:
        assert np.min(np.abs(dec.s - delta)) > 0


# --- randomized_svd --------------------------------------------------------------

def test_randomized_exact_low_rank():
    rng = np.random.default_rng(18)
    a = rng.standard_normal((200, 9)) @ rng.standard_normal((9, 40))
    dec = randomized_svd(a, k=9, p=5, q=1, seed=0)
    recon = (dec.u * dec.s) @ dec.v.T
    assert np.linalg.norm(recon - a) <= 1e-8 * np.linalg.norm(a)


def test_randomized_matches_exact_on_decaying_spectrum():
    rng = np.random.default_rng(19)
    uq, _ = np.linalg.qr(rng.standard_normal((4096, 40)))
    vq, _ = np.linalg.qr(rng.standard_normal((256, 40)))
    s_true = 1000.0 * 0.85 ** np.arange(40)
    a = (uq * s_true) @ vq.T
    exact = svd_thin(a)
    rnd = randomized_svd(a, k=20, p=10, q=2, seed=3)
    assert np.max(np.abs(rnd.s - exact.s[:20]) / exact.s[:20]) <= 1e-6


def test_randomized_subspace_agreement_with_spectral_gap():
    # >= 10x decay then a hard gap: the recovered subspace matches exactly
    rng = np.random.default_rng(20)
    uq, _ = np.linalg.qr(rng.standard_normal((1024, 24)))
    vq, _ = np.linalg.qr(rng.standard_normal((64, 24)))
    s_true = np.concatenate([np.geomspace(1000.0, 100.0, 12), np.full(12, 1e-3)])
    a = (uq * s_true) @ vq.T
    exact = svd_thin(a)
    rnd = randomized_svd(a, k=12, p=8, q=2, seed=5)
    angles = np.linalg.svd(exact.u[:, :12].T @ rnd.u, compute_uv=False)
    assert np.arccos(np.clip(angles.min(), 0, 1)) <= 1e-6


def test_randomized_deterministic_per_seed():
    rng = np.random.default_rng(21)
    a = rng.standard_normal((300, 30))
    d1 = randomized_svd(a, k=10, p=5, q=2, seed=7)
    d2 = randomized_svd(a, k=10, p=5, q=2, seed=7)
    assert np.array_equal(d1.u, d2.u)
    assert np.array_equal(d1.s, d2.s)
    assert np.array_equal(d1.v, d2.v)
    d3 = randomized_svd(a, k=10, p=5, q=2, seed=8)
    assert not np.array_equal(d1.u, d3.u)


def test_randomized_rank_bounds():
    rng = np.random.default_rng(22)
    a = rng.standard_normal((50, 20))
    with pytest.raises(ValueError):
        randomized_svd(a, k=18, p=5)
    check = randomized_svd(a, k=10, p=10)
    assert check.rank == 10


def test_randomized_orthonormal_factors():
    rng = np.random.default_rng(23)
    a = rng.standard_normal((200, 40))
    dec = randomized_svd(a, k=12, p=6, q=1, seed=1)
    check_decomposition(dec)


def test_sure_on_truncated_decomposition_tracks_exact():
    # tail energy accounting: risk curves from a randomized factorization
    # select the same rank as the exact one on a well-separated instance
    spec = voronoi_phantom(size=64, frames=32, sigma=60.0, seed=4)
    noisy, _ = generate(spec)
    a = to_matrix(noisy)
    exact = select_rank(svd_thin(a), 60.0)
    rnd = select_rank(randomized_svd(a, k=16, p=8, q=2, seed=0), 60.0)
    assert rnd.selected_k == exact.selected_k
