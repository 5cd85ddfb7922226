import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mumimo import classic
from mumimo.classic import mse_matrices, power, rzf, split_blocks, sum_rate, user_rates, wmmse_solve, wmmse_step, zf
from mumimo.complex_tensor import SingularMatrixError


def crand(rng, *shape):
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2)


def rate_oracle(H, V, sigma2):
    """Per-user rate from the eigenvalues of the SINR matrix, sample by sample."""
    K, n_r, _ = H.shape
    out = []
    for k in range(K):
        Hk = H[k]
        Vk = V[:, k * n_r:(k + 1) * n_r]
        Q = sigma2[k] * np.eye(n_r, dtype=complex)
        for i in range(K):
            if i != k:
                Vi = V[:, i * n_r:(i + 1) * n_r]
                Q += Hk @ Vi @ Vi.conj().T @ Hk.conj().T
        A = Vk.conj().T @ Hk.conj().T @ np.linalg.solve(Q, Hk @ Vk)
        ev = np.linalg.eigvals(A).real
        out.append(np.sum(np.log1p(ev)))
    return np.array(out)


def test_rate_vanishes_with_power():
    rng = np.random.default_rng(0)
    H = crand(rng, 2, 1, 2)
    V = 1e-9 * crand(rng, 2, 2)
    assert np.all(user_rates(H, V, 1.0) < 1e-15)


def test_matched_filter_rate():
    rng = np.random.default_rng(1)
    h = crand(rng, 1, 1, 4)
    Es, s2 = 2.0, 0.3
    v = np.sqrt(Es) * h[0, 0].conj()[:, None] / np.linalg.norm(h)
    expected = np.log(1 + Es * np.linalg.norm(h) ** 2 / s2)
    assert np.isclose(sum_rate(h, v, s2), expected, rtol=1e-12)


def test_rate_matches_eigen_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        H = crand(rng, 2, 2, 4)
        V = classic.normalize_power(crand(rng, 4, 4), 1.0)
        s2 = np.array([0.2, 0.5])
        assert np.allclose(user_rates(H, V, s2), rate_oracle(H, V, s2), rtol=1e-9, atol=0)


def test_mse_examples():
    rng = np.random.default_rng(3)
    H = crand(rng, 2, 2, 4)
    V = crand(rng, 4, 4)
    V[:, :2] = 0  # user 0 gets nothing
    E = mse_matrices(H, V, 1.0)
    assert np.allclose(E[0], np.eye(2), atol=1e-14)
    assert np.isclose(np.trace(E[0]).real, 2)
    h = crand(rng, 1, 1, 3)
    v = h[0, 0].conj()[:, None] / np.linalg.norm(h)
    s2 = 0.4
    assert np.isclose(mse_matrices(h, v, s2)[0, 0, 0].real, 1 / (1 + np.linalg.norm(h) ** 2 / s2))


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.integers(1, 2))
@settings(max_examples=40, deadline=None)
def test_rate_mse_bridge(seed, K, n_r):
    rng = np.random.default_rng(seed)
    n_t = K * n_r + 1
    H = crand(rng, K, n_r, n_t)
    V = crand(rng, n_t, K * n_r)
    s2 = rng.uniform(0.05, 2.0, K)
    E = mse_matrices(H, V, s2)
    assert np.allclose(E, np.conj(np.swapaxes(E, -1, -2)), atol=1e-12)
    assert np.all(np.linalg.eigvalsh(E) > 0)
    ld = -np.linalg.slogdet(E)[1]
    R = user_rates(H, V, s2)
    assert np.allclose(ld, R, rtol=1e-9, atol=1e-12)


def test_rzf_single_user_is_mrt():
    rng = np.random.default_rng(4)
    h = crand(rng, 1, 1, 4)
    v = rzf(h, 1.0, 0.1)[:, 0]
    cos = abs(np.vdot(h[0, 0].conj(), v)) / (np.linalg.norm(h) * np.linalg.norm(v))
    assert cos > 1 - 1e-12


@pytest.mark.parametrize("K, n_r, n_t", [(2, 1, 2), (3, 1, 4), (2, 2, 4)])
def test_precoder_power(K, n_r, n_t):
    rng = np.random.default_rng(5)
    H = crand(rng, 10, K, n_r, n_t)
    assert np.allclose(power(rzf(H, 2.5, 0.1)), 2.5, rtol=1e-9)
    assert np.allclose(power(zf(H, 2.5)), 2.5, rtol=1e-9)
    assert np.allclose(power(wmmse_solve(H, 2.5, 0.1, max_iter=20).V), 2.5, rtol=1e-9)


def test_zf_nulls_interference():
    rng = np.random.default_rng(6)
    H = crand(rng, 3, 2, 6)
    B = split_blocks(zf(H, 1.0), 2)
    for k in range(3):
        for i in range(3):
            if i != k:
                assert np.linalg.norm(H[k] @ B[i]) < 1e-6
    # RZF at sigma^2 = 1e-6 is already within O(beta) of ZF
    assert np.linalg.norm(rzf(H, 1.0, 1e-6) - zf(H, 1.0)) < 1e-4


def test_rzf_tends_to_zf():
    rng = np.random.default_rng(7)
    H = crand(rng, 2, 1, 3)
    gaps = [np.linalg.norm(rzf(H, 1.0, s2) - zf(H, 1.0)) for s2 in (1e-1, 1e-3, 1e-5)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-4


def test_zf_errors():
    with pytest.raises(ValueError):
        zf(np.ones((3, 1, 2)), 1.0)
    H = np.ones((2, 1, 2), dtype=complex)  # both users identical -> rank one
    with pytest.raises(SingularMatrixError):
        zf(H, 1.0)


def test_wmmse_step_weights_are_inverse_mse():
    rng = np.random.default_rng(8)
    H = crand(rng, 2, 2, 4)
    V = rzf(H, 1.0, 0.3)
    U, W, V1 = wmmse_step(H, V, 1.0, 0.3)
    E = mse_matrices(H, V, 0.3)
    assert np.allclose(W, np.linalg.inv(E), atol=1e-10)
    assert np.allclose(W, np.conj(np.swapaxes(W, -1, -2)), atol=1e-12)
    assert np.isclose(power(V1), 1.0)


def test_wmmse_fixed_point():
    rng = np.random.default_rng(9)
    H = crand(rng, 2, 1, 2)
    state = wmmse_solve(H, 1.0, 0.1, tol=1e-13, max_iter=5000)
    r0 = sum_rate(H, state.V, 0.1)
    _, _, V1 = wmmse_step(H, state.V, 1.0, 0.1)
    assert abs(sum_rate(H, V1, 0.1) - r0) < 1e-8


def test_wmmse_single_user_eigenbeam():
    rng = np.random.default_rng(10)
    H = crand(rng, 1, 2, 4)
    state = wmmse_solve(H, 1.0, 0.5, max_iter=50, tol=0.0)
    _, _, vh = np.linalg.svd(H[0])
    dominant = vh.conj().T[:, :2]  # right singular space
    Q, _ = np.linalg.qr(state.V)
    # principal angles between the precoder span and the dominant right singular space
    s = np.linalg.svd(dominant.conj().T @ Q, compute_uv=False)
    assert np.arccos(np.clip(s.min(), -1, 1)) < 1e-4


def test_wmmse_beats_random_search():
    rng = np.random.default_rng(11)
    H = crand(rng, 2, 1, 2)
    s2 = 0.1
    state = wmmse_solve(H, 1.0, s2)
    best = 0.0
    for _ in range(10):
        V = classic.normalize_power(crand(rng, 10_000, 2, 2), 1.0)
        best = max(best, sum_rate(H, V, s2).max())
    assert sum_rate(H, state.V, s2) >= best - 1e-9


def test_wmmse_low_snr_single_user():
    rng = np.random.default_rng(12)
    H = crand(rng, 3, 1, 2)
    s2 = 1e4  # -40 dB
    state = wmmse_solve(H, 1.0, s2, tol=1e-12, max_iter=2000)
    blocks = np.sum(np.abs(split_blocks(state.V, 1)) ** 2, axis=(-2, -1))
    k = np.argmax(np.linalg.norm(H[:, 0], axis=-1))
    assert blocks[k] > 1 - 1e-3


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=15, deadline=None)
def test_wmmse_monotone_from_rzf(seed):
    rng = np.random.default_rng(seed)
    H = crand(rng, 8, 2, 2, 4)
    s2 = rng.uniform(0.01, 1.0)
    state = wmmse_solve(H, 1.0, s2, max_iter=100)
    start = sum_rate(H, rzf(H, 1.0, s2), s2)
    assert np.all(sum_rate(H, state.V, s2) >= start - 1e-9)
    for tr in state.sum_rate_trace:
        assert np.all(np.diff(tr) >= -1e-9)


def test_wmmse_flags_non_convergence():
    rng = np.random.default_rng(13)
    H = crand(rng, 4, 3, 1, 3)
    state = wmmse_solve(H, 1.0, 0.01, tol=0.0, max_iter=3)
    assert not np.any(state.converged)
    assert np.all(state.iteration == 3)
