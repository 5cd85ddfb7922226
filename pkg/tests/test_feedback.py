import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mumimo import feedback as fb
from mumimo.channels import FormatError
from mumimo.classic import sum_rate, wmmse_solve
from mumimo.rng import STREAM_NOISE, complex_normal, make_rng


def crand(rng, *shape):
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2)


@pytest.mark.parametrize("n_t, t_p, e_p", [(2, 2, 1.0), (4, 4, 2.0), (2, 5, 0.5)])
def test_orthogonal_pilots(n_t, t_p, e_p):
    P = fb.orthogonal_pilots(n_t, t_p, e_p)
    G = P @ P.conj().T
    assert np.allclose(G, t_p * e_p / n_t * np.eye(n_t), atol=1e-12)
    assert abs(np.trace(G).real / t_p - e_p) < 1e-12
    assert np.isclose(np.linalg.cond(P), 1.0)


def test_orthogonal_pilots_need_enough_slots():
    with pytest.raises(fb.UnsupportedConfigError):
        fb.orthogonal_pilots(4, 3, 1.0)


def test_lmmse_noiseless_recovers_channel():
    rng = np.random.default_rng(0)
    H = crand(rng, 3, 2, 4)
    P = fb.orthogonal_pilots(4, 4, 1.0)
    Y = H @ P
    Hh = fb.lmmse_estimate(Y, P, 1e-12)
    assert np.linalg.norm(Hh - H) / np.linalg.norm(H) < 1e-6


def test_lmmse_mse_matches_theory():
    n_t, t_p, e_p, s2 = 4, 4, 1.0, 0.5
    rng = make_rng(3, STREAM_NOISE)
    H = complex_normal(rng, (10_000, 1, 1, n_t))
    P = fb.orthogonal_pilots(n_t, t_p, e_p)
    Y = fb.receive_pilots(H, P, s2, rng)
    mse = np.mean(np.sum(np.abs(fb.lmmse_estimate(Y, P, s2) - H) ** 2, axis=(-2, -1)))
    theory = n_t * s2 / (t_p * e_p / n_t + s2)
    assert abs(mse / theory - 1) < 0.03


def test_lmmse_linear():
    rng = np.random.default_rng(1)
    Y = crand(rng, 2, 3)
    P = fb.orthogonal_pilots(3, 3, 1.0)
    a = 2.5 - 1j
    assert np.allclose(fb.lmmse_estimate(a * Y, P, 0.3), a * fb.lmmse_estimate(Y, P, 0.3))


def test_receive_pilots_uses_supplied_noise():
    rng = np.random.default_rng(2)
    H = crand(rng, 5, 2, 1, 2)
    N = crand(rng, 5, 2, 1, 2)
    P = fb.orthogonal_pilots(2, 2, 1.0)
    Y = fb.receive_pilots(H, P, np.array([0.25, 1.0]), noise=N)
    assert np.allclose(Y[:, 0], H[:, 0] @ P + 0.5 * N[:, 0])
    assert np.allclose(Y[:, 1], H[:, 1] @ P + N[:, 1])


def test_chordal_distance_basic():
    e1 = np.array([[1.0, 0.0]], dtype=complex)
    e2 = np.array([[0.0, 1.0]], dtype=complex)
    assert np.isclose(fb.chordal_distance(e1, 3j * e1), 0.0)
    assert np.isclose(fb.chordal_distance(e1, e2), 1.0)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 2))
@settings(max_examples=30, deadline=None)
def test_chordal_subspace_invariance(seed, n_r):
    rng = np.random.default_rng(seed)
    A, B = crand(rng, n_r, 4), crand(rng, n_r, 4)
    Q, _ = np.linalg.qr(crand(rng, n_r, n_r))
    d = fb.chordal_distance(A, B)
    # mixing the rows by an invertible (here unitary) matrix keeps the row space
    assert abs(fb.chordal_distance(Q @ A, B) - d) < 1e-10
    assert abs(fb.chordal_distance(A, Q @ B) - d) < 1e-10


def test_chordal_select_exact_and_ties():
    cb = fb.MatrixCodebook(np.array([[[1, 0]], [[0, 1]], [[1, 0]]], dtype=complex))
    assert fb.chordal_select(np.array([[0.0, 2j]]), cb) == 1
    # codeword 0 and 2 coincide -> lowest index
    assert fb.chordal_select(np.array([[5.0, 0.0]]), cb) == 0


def test_codebook_unit_norm_enforced():
    with pytest.raises(ValueError):
        fb.MatrixCodebook(np.ones((2, 1, 2)))


def test_lloyd_zero_distortion_when_codebook_covers_samples():
    rng = np.random.default_rng(3)
    S = crand(rng, 4, 1, 3)
    cb, trace = fb.lloyd_codebook_train(S, B=2, seed=0)
    assert trace[-1] < 1e-12


def test_lloyd_two_clusters():
    rng = np.random.default_rng(4)
    e = np.eye(2)
    S = np.concatenate([e[0] + 0.05 * crand(rng, 200, 2), e[1] + 0.05 * crand(rng, 200, 2)])[:, None, :]
    cb, _ = fb.lloyd_codebook_train(S, B=1, seed=1)
    cw = cb.entries[:, 0, :]
    cos = np.abs(cw @ e.T)
    assert sorted(np.max(cos, axis=0)) == pytest.approx([1, 1], abs=0.01)
    assert np.all(np.max(cos, axis=0) > 0.99)


@pytest.mark.parametrize("n_r", [1, 2])
def test_lloyd_distortion_non_increasing(n_r):
    rng = np.random.default_rng(5)
    S = crand(rng, 800, n_r, 4)
    cb, trace = fb.lloyd_codebook_train(S, B=3, seed=2, iters=30)
    assert np.all(np.diff(trace) <= 1e-12)
    nrm = np.linalg.norm(cb.entries, axis=(-2, -1))
    assert np.allclose(nrm, 1, atol=1e-12)


def test_lloyd_needs_enough_samples():
    with pytest.raises(ValueError):
        fb.lloyd_codebook_train(np.ones((3, 1, 2), dtype=complex), B=2, seed=0)


def test_scalar_quantizer_midpoint_goes_low():
    q = fb.ScalarQuantizer([0.0, 1.0])
    assert fb.quantize(q, 0.5) == 0.0
    assert fb.quantize(q, 0.5 + 1e-12) == 1.0
    assert np.allclose(q.boundaries, [0.5])


def test_scalar_quantizer_rejects_unsorted():
    with pytest.raises(ValueError):
        fb.ScalarQuantizer([1.0, 0.5])


def test_scalar_lloyd_uniform_fixed_point():
    x = np.random.default_rng(6).uniform(size=100_000)
    q = fb.lloyd_scalar_train(x, 1)
    assert np.allclose(q.levels, [0.25, 0.75], atol=0.02)


def test_codebook_file_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    cb, _ = fb.lloyd_codebook_train(crand(rng, 100, 2, 3), B=2, seed=0)
    path = tmp_path / "cb.bin"
    fb.save_codebook(cb, path)
    raw = path.read_bytes()
    assert raw[:8] == b"MUMIMOCB"
    assert struct.unpack("<4I", raw[8:24]) == (1, 3, 2, 2)
    assert np.array_equal(fb.load_codebook(path).entries, cb.entries)
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        fb.load_codebook(path)


def test_pipeline_lossless_limit():
    # codebook = the exact test channels, pilots noiseless, exact CQI
    rng = np.random.default_rng(8)
    H = crand(rng, 1, 2, 1, 2)
    s2 = 0.1
    entries = H[0] / np.linalg.norm(H[0], axis=(-2, -1), keepdims=True)
    system = fb.BaselineSystem(P=fb.orthogonal_pilots(2, 2, 1.0), codebook=fb.MatrixCodebook(entries), cqi=None,
                               Es=1.0)
    V = fb.baseline_pipeline(H, system, s2, rng=make_rng(0, STREAM_NOISE), pilot_sigma2=1e-14, prior_var=1e14)
    ref = wmmse_solve(H, 1.0, s2).V
    assert abs(sum_rate(H, V, s2) - sum_rate(H, ref, s2))[0] < 1e-6


def test_pipeline_exact_shortcut_matches_wmmse():
    # the BS-side solver is exactly classic WMMSE on the reconstruction
    rng = np.random.default_rng(9)
    H = crand(rng, 5, 2, 1, 2)
    Htr = crand(rng, 500, 2, 1, 2)
    system = fb.fit_baseline(Htr, 0.1, 1.0, 1.0, 2, 2, seed=0)
    noise = crand(rng, 5, 2, 1, 2)
    _, Hbs = fb.feedback_reconstruct(H, system, 0.1, noise=noise)
    V = fb.baseline_pipeline(H, system, 0.1, noise=noise)
    assert np.array_equal(V, wmmse_solve(Hbs, 1.0, 0.1).V)


def test_pipeline_rate_grows_with_bits():
    rng = make_rng(10, 1)
    Htr = complex_normal(rng, (4000, 2, 1, 2))
    H = complex_normal(rng, (2000, 2, 1, 2))
    noise = complex_normal(rng, (2000, 2, 1, 2))
    s2 = 0.1
    rates = []
    for B in (2, 4, 6):
        system = fb.fit_baseline(Htr, s2, 1.0, 1.0, 2, B, seed=0)
        rates.append(sum_rate(H, fb.baseline_pipeline(H, system, s2, noise=noise), s2).mean())
    assert rates[1] >= 0.98 * rates[0]
    assert rates[2] >= 0.98 * rates[1]


def test_zero_cqi_bits_is_constant_magnitude():
    rng = np.random.default_rng(11)
    Htr = crand(rng, 500, 2, 1, 2)
    system = fb.fit_baseline(Htr, 0.1, 1.0, 1.0, 2, 2, seed=0, cqi_bits=0)
    assert len(system.cqi.levels) == 1
    H = crand(rng, 20, 2, 1, 2)
    _, Hbs = fb.feedback_reconstruct(H, system, 0.1, noise=crand(rng, 20, 2, 1, 2))
    assert np.allclose(np.linalg.norm(Hbs, axis=(-2, -1)), system.cqi.levels[0])
    exact = fb.fit_baseline(Htr, 0.1, 1.0, 1.0, 2, 2, seed=0, cqi_bits=None)
    assert exact.cqi is None
