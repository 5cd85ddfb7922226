import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mumimo import autodiff as ad
from mumimo import neural as nn
from mumimo.channels import FormatError
from mumimo.classic import power, rzf, sum_rate, wmmse_step
from mumimo.feedback import ScalarQuantizer
from mumimo.training import init_params


def crand(rng, *shape):
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2)


def small_config(**kw):
    base = dict(K=2, N_t=2, N_r=1, B=2, hidden_G=(6,), hidden_D=(6,), hidden_U=(8,), hidden_W=(8,))
    base.update(kw)
    return nn.ModelConfig(**base)


# ---------------------------------------------------------------------------
# FC network


def test_fc_identity_single_layer():
    net = nn.FcNetwork("f", (3, 3), use_bn=False)
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = nn.fc_forward(net, x, {"f.W0": np.eye(3), "f.b0": np.zeros(3)}, training=False)
    assert np.array_equal(out.value, x)


def test_fc_zero_weights_give_bias():
    net = nn.FcNetwork("f", (4, 2), use_bn=False)
    out = nn.fc_forward(net, np.ones((3, 4)), {"f.W0": np.zeros((4, 2)), "f.b0": np.array([1.5, -2.0])}, False)
    assert np.array_equal(out.value, np.tile([1.5, -2.0], (3, 1)))


def fc_loop_oracle(net, x, p):
    """Scalar-loop reference for Linear -> BN (inference) -> ReLU stacks."""
    out = []
    for row in x:
        h = list(row)
        for l in range(net.n_layers):
            W, b = p[f"{net.name}.W{l}"], p[f"{net.name}.b{l}"]
            z = [b[j] + sum(h[i] * W[i, j] for i in range(len(h))) for j in range(W.shape[1])]
            if l < net.n_layers - 1:
                st_ = net.bn_state[l]
                g, be = p[f"{net.name}.gamma{l}"], p[f"{net.name}.beta{l}"]
                z = [g[j] * (z[j] - st_["running_mean"][j]) / np.sqrt(st_["running_var"][j] + 1e-5) + be[j]
                     for j in range(len(z))]
                z = [max(v, 0.0) for v in z]
            h = z
        out.append(h)
    return np.array(out)


def test_fc_matches_loop_oracle():
    rng = np.random.default_rng(1)
    net = nn.FcNetwork("f", (3, 5, 4, 2))
    p = {name: rng.normal(size=shape) for name, shape in net.param_shapes()}
    for st_ in net.bn_state:
        st_["running_mean"] = rng.normal(size=st_["running_mean"].shape)
        st_["running_var"] = rng.uniform(0.5, 2.0, size=st_["running_var"].shape)
    x = rng.normal(size=(4, 3))
    out = nn.fc_forward(net, x, p, training=False).value
    assert np.allclose(out, fc_loop_oracle(net, x, p), rtol=0, atol=1e-12)


def test_fc_width_mismatch():
    net = nn.FcNetwork("f", (3, 2), use_bn=False)
    with pytest.raises(ad.DimensionError):
        nn.fc_forward(net, np.ones((2, 4)), {"f.W0": np.zeros((3, 2)), "f.b0": np.zeros(2)}, False)


# ---------------------------------------------------------------------------
# pilots and user side


def test_pilot_noiseless_scaled_identity():
    rng = np.random.default_rng(2)
    H = crand(rng, 3, 2, 1, 4)
    c = 0.7
    Y = nn.pilot_forward(c * np.eye(4), H, np.zeros((3, 2, 1, 4)), 1.0)
    assert np.allclose(Y.value, c * H, atol=1e-15)


def test_pilot_noise_power():
    rng = np.random.default_rng(3)
    n = 10_000
    noise = crand(rng, n, 2, 1, 2)
    s2 = np.array([0.5, 2.0])
    Y = nn.pilot_forward(np.zeros((2, 2)), np.zeros((n, 2, 1, 2)), noise, s2).value
    pw = np.mean(np.abs(Y) ** 2, axis=(0, 2, 3))
    assert np.allclose(pw / s2, 1.0, atol=0.03)


def test_pilot_gradient():
    rng = np.random.default_rng(4)
    H = crand(rng, 3, 2, 1, 2)
    noise = crand(rng, 3, 2, 1, 3)
    rep = ad.grad_check(lambda p: ad.sum(ad.abs2(nn.pilot_forward(p["P"], H, noise, 0.3))),
                        {"P": crand(rng, 2, 3)})
    assert rep.passed, rep.summary()


def test_equal_correlations_give_uniform_weights():
    s = ad.const(np.full((1, 1, 4), 0.3))
    e = ad.softpow_select(s, 6.0).value
    assert np.allclose(e, 0.25, atol=1e-15)


def test_large_alpha_is_one_hot():
    s = np.array([[[0.2, 0.5, 0.49, 0.1]]])
    e = ad.softpow_select(ad.const(s), 1e6).value
    assert np.allclose(e, [[[0, 1, 0, 0]]], atol=1e-12)


def test_soft_weights_direct_formula():
    rng = np.random.default_rng(5)
    corr = rng.uniform(0.05, 1.0, size=(3, 2, 8))
    e = ad.softpow_select(ad.const(corr ** 2), 6.0).value
    ref = corr ** 6 / np.sum(corr ** 6, axis=-1, keepdims=True)
    assert np.allclose(e, ref, rtol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.5, 30.0))
@settings(max_examples=50, deadline=None)
def test_soft_weight_properties(seed, alpha):
    s = np.random.default_rng(seed).uniform(0.01, 1.0, size=(2, 3, 8))
    e = ad.softpow_select(ad.const(s), alpha).value
    assert np.all(e >= 0)
    assert np.allclose(e.sum(axis=-1), 1.0, atol=1e-12)
    assert np.array_equal(np.argmax(e, axis=-1), np.argmax(s, axis=-1))


def test_entropy_decreases_with_alpha():
    s = ad.const(np.random.default_rng(6).uniform(0.1, 1.0, size=(1, 1, 16)))

    def entropy(a):
        e = ad.softpow_select(s, a).value
        return -np.sum(e * np.log(e))

    h = [entropy(a) for a in (1.0, 3.0, 6.0, 12.0, 24.0)]
    assert all(x > y for x, y in zip(h, h[1:]))


def test_user_forward_hard_index_is_best_correlation():
    params = init_params(small_config(), seed=0)
    rng = np.random.default_rng(7)
    Y = ad.const(crand(rng, 5, 2, 1, 2))
    G, Gbar, e, idx, deg = nn.user_forward(params, params.values, Y, 3.0, training=False)
    C = params.values["C"]
    corr = np.abs(np.einsum("bkn,nm->bkm", Gbar.value[:, :, 0, :], C))
    assert np.array_equal(idx, np.argmax(corr, axis=-1))
    assert np.allclose(np.linalg.norm(Gbar.value, axis=-1), 1.0)
    assert not deg.any()


def test_user_forward_rejects_bad_alpha():
    params = init_params(small_config(), seed=0)
    with pytest.raises(ad.ContractError):
        nn.user_forward(params, params.values, ad.const(np.zeros((1, 2, 1, 2), complex)), 0.0, False)


# ---------------------------------------------------------------------------
# dequantizer


def test_dequantize_soft_one_hot_equals_hard():
    params = init_params(small_config(), seed=1)
    idx = np.array([[0, 3], [2, 1]])
    hard = nn.dequantize(params, params.values, None, idx, hard=True, training=False)
    soft = nn.dequantize(params, params.values, nn.one_hot(idx, 4), None, hard=False, training=False)
    assert np.array_equal(hard.value, soft.value)


def test_dequantize_picks_codeword_column():
    cfg = small_config()
    params = init_params(cfg, seed=2)
    # make D an identity map on the real packing of the codeword
    net = params.nets["D"]
    p = dict(params.values)
    p["D.W0"] = np.hstack([np.eye(4), np.zeros((4, 2))])
    p["D.b0"] = np.zeros(6)
    p["D.gamma0"] = np.ones(6)
    p["D.beta0"] = np.zeros(6)
    net.bn_state[0]["running_mean"][:] = 0
    net.bn_state[0]["running_var"][:] = 1 - 1e-5
    p["D.W1"] = np.vstack([np.eye(4), np.zeros((2, 4))])
    p["D.b1"] = np.zeros(4)
    C = np.array([[1.0, 0.0, 0.6, 0.0], [0.0, 1.0, 0.8j, -1.0]])
    p["C"] = C
    idx = np.array([[0, 2]])
    # ReLU keeps only nonnegative packed entries; the chosen codewords satisfy that
    Hbar = nn.dequantize(params, p, None, idx, hard=True, training=False).value
    assert np.allclose(Hbar[0, 0, 0], C[:, 0], atol=1e-12)
    assert np.allclose(Hbar[0, 1, 0], C[:, 2], atol=1e-12)
    # full CQI scales the codeword before the network
    Hq = nn.dequantize(params, p, None, idx, hard=True, training=False, cqi=np.array([[2.0, 3.0]])).value
    assert np.allclose(Hq[0, 1, 0], 3.0 * C[:, 2], atol=1e-12)


def test_dequantize_index_out_of_range():
    params = init_params(small_config(), seed=3)
    with pytest.raises(ad.ContractError):
        nn.dequantize(params, params.values, None, np.array([[0, 4]]), hard=True, training=False)


# ---------------------------------------------------------------------------
# BS network


@pytest.mark.parametrize("K, n_r, n_t", [(2, 1, 2), (2, 2, 4), (3, 1, 4)])
def test_bs_power(K, n_r, n_t):
    params = init_params(small_config(K=K, N_r=n_r, N_t=n_t), seed=4)
    params.w_identity = False
    H = crand(np.random.default_rng(8), 6, K, n_r, n_t)
    V, _ = nn.bs_forward(params, params.values, H, 1.0, 0.1, training=False)
    assert np.allclose(power(V.value), 1.0, rtol=0, atol=1e-9)


def test_bs_zero_w_network_gives_identity_weights():
    params = init_params(small_config(), seed=5)
    params.w_identity = False
    p = dict(params.values)
    net = params.nets["W"]
    last = net.n_layers - 1
    p[f"W.W{last}"] = np.zeros_like(p[f"W.W{last}"])
    H = crand(np.random.default_rng(9), 3, 2, 1, 2)
    _, bs = nn.bs_forward(params, p, H, 1.0, 0.1, training=False)
    assert np.allclose(bs["W"].value, np.eye(1), atol=1e-15)
    V1, _ = nn.bs_forward(params, p, H, 1.0, 0.1, training=False)
    V2, _ = nn.bs_forward(params, p, H, 1.0, 0.1, training=False, w_identity=True)
    assert np.allclose(V1.value, V2.value, atol=1e-13)


@pytest.mark.parametrize("K, n_r, n_t", [(2, 1, 2), (2, 2, 4)])
def test_bs_matches_wmmse_step(K, n_r, n_t):
    rng = np.random.default_rng(10)
    H = crand(rng, 4, K, n_r, n_t)
    s2 = 0.2
    U, W, V_ref = wmmse_step(H, rzf(H, 1.0, s2), 1.0, s2)
    params = init_params(small_config(K=K, N_r=n_r, N_t=n_t), seed=6)
    p = dict(params.values)
    p["beta_theta"] = np.array(0.0)
    V, _ = nn.bs_forward(params, p, H, 1.0, s2, training=False, W_override=W, U_override=U)
    assert np.allclose(V.value, V_ref, rtol=0, atol=1e-9)


def test_rzf_var_matches_classic():
    rng = np.random.default_rng(11)
    H = crand(rng, 5, 2, 2, 4)
    V = nn.rzf_var(ad.const(H), 1.0, np.full((5, 2), 0.3)).value
    assert np.allclose(V, rzf(H, 1.0, 0.3), atol=1e-12)


def test_mse_var_matches_classic():
    from mumimo.classic import mse_matrices
    rng = np.random.default_rng(12)
    H = crand(rng, 3, 2, 2, 4)
    V = crand(rng, 3, 4, 4)
    assert np.allclose(nn.mse_var(H, ad.const(V), 0.4).value, mse_matrices(H, V, 0.4), atol=1e-12)


def test_bs_dimension_check():
    params = init_params(small_config(), seed=7)
    with pytest.raises(ad.DimensionError):
        nn.bs_forward(params, params.values, np.zeros((1, 3, 1, 2), complex), 1.0, 0.1, False)


# ---------------------------------------------------------------------------
# composition


def test_bypass_equals_bs_on_true_channel():
    params = init_params(small_config(), seed=8)
    rng = np.random.default_rng(13)
    H = crand(rng, 4, 2, 1, 2)
    V1, _ = nn.end_to_end_forward(params, params.values, H, None, 0.1, training=False, bypass_quantizer=True)
    V2, _ = nn.bs_forward(params, params.values, H, 1.0, 0.1, training=False)
    assert np.array_equal(V1.value, V2.value)


def test_end_to_end_deterministic():
    params = init_params(small_config(), seed=9)
    rng = np.random.default_rng(14)
    H, N = crand(rng, 4, 2, 1, 2), crand(rng, 4, 2, 1, 2)
    a = nn.predict(params, H, N, 0.1)
    b = nn.predict(params, H, N, 0.1)
    assert np.array_equal(a, b)
    assert np.allclose(power(a), 1.0)


def test_predict_chunking_is_invisible():
    params = init_params(small_config(), seed=10)
    rng = np.random.default_rng(15)
    H, N = crand(rng, 7, 2, 1, 2), crand(rng, 7, 2, 1, 2)
    assert np.allclose(nn.predict(params, H, N, 0.1, chunk=3), nn.predict(params, H, N, 0.1), atol=1e-13)


def test_all_active_equals_unmasked():
    params = init_params(small_config(), seed=11)
    params.w_identity = False
    rng = np.random.default_rng(16)
    H, N = crand(rng, 4, 2, 1, 2), crand(rng, 4, 2, 1, 2)
    act = np.ones((4, 2), dtype=bool)
    a = nn.predict(params, H, N, 0.1)
    b = nn.predict(params, H, N, 0.1, active=act)
    assert np.allclose(a, b, atol=1e-12)


def test_inactive_user_gets_zero_gradient():
    params = init_params(small_config(K=3, N_t=3), seed=12)
    params.w_identity = False
    rng = np.random.default_rng(17)
    H0, N = crand(rng, 4, 3, 1, 3), crand(rng, 4, 3, 1, 3)
    act = np.array([[True, False, True]] * 4)
    tape = ad.Tape(update_stats=False)
    Hl = tape.leaf(H0)
    Hm = ad.where_mask(Hl, act[:, :, None, None])
    V, _ = nn.end_to_end_forward(params, params.values, Hm, N, 0.1, training=True, active=act)
    E = nn.mse_var(Hm, V, 0.1)
    loss = ad.sum(ad.trace_real(E) * ad.const(act.astype(float)))
    ad.backward(tape, loss)
    assert np.all(Hl.grad[:, 1] == 0)
    assert np.any(Hl.grad[:, 0] != 0)
    masked = nn.predict(params, H0, N, 0.1, active=act)
    assert np.all(masked[:, :, 1] == 0)


def test_mask_users_rejects_empty_sample():
    H = np.ones((2, 3, 1, 2), dtype=complex)
    with pytest.raises(ad.ContractError):
        nn.mask_users(H, np.array([[True, False, False], [False, False, False]]))
    Hm, act = nn.mask_users(H, [0, 2])
    assert act.shape == (2, 3)
    assert np.all(Hm[:, 1] == 0) and np.all(Hm[:, 0] == 1)


def test_feedback_message_contract():
    with pytest.raises(ad.ContractError):
        nn.FeedbackMessage(index=np.zeros((1, 2), int), weights=np.full((1, 2, 4), 0.3))
    params = init_params(small_config(), seed=13)
    rng = np.random.default_rng(18)
    _, diag = nn.end_to_end_forward(params, params.values, crand(rng, 3, 2, 1, 2), crand(rng, 3, 2, 1, 2),
                                    0.1, training=False)
    msg = nn.feedback_message(diag)
    assert msg.index.shape == (3, 2) and msg.weights.shape == (3, 2, 4)


def test_unknown_cqi_mode():
    params = init_params(small_config(), seed=14)
    rng = np.random.default_rng(19)
    with pytest.raises(ad.ContractError):
        nn.end_to_end_forward(params, params.values, crand(rng, 2, 2, 1, 2), crand(rng, 2, 2, 1, 2), 0.1,
                              training=False, cqi_mode="bogus")
    with pytest.raises(ad.ContractError):
        nn.end_to_end_forward(params, params.values, crand(rng, 2, 2, 1, 2), crand(rng, 2, 2, 1, 2), 0.1,
                              training=False, cqi_mode="quant")


@pytest.mark.parametrize("cqi_mode", ["none", "full"])
def test_end_to_end_gradient(cqi_mode):
    params = init_params(small_config(), seed=15)
    params.w_identity = False
    rng = np.random.default_rng(20)
    H, N = crand(rng, 3, 2, 1, 2), crand(rng, 3, 2, 1, 2)
    names = ["P", "C", "G.W0", "D.W1", "U.W1", "W.W0", "beta_theta"]

    def loss(p):
        full = dict(params.values)
        full.update(p)
        V, _ = nn.end_to_end_forward(params, full, H, N, 0.1, training=True, hard=False, cqi_mode=cqi_mode)
        return ad.sum(ad.trace_real(nn.mse_var(H, V, 0.1)))

    rep = ad.grad_check(loss, {n: params.values[n] for n in names}, max_coords=12)
    assert rep.passed, rep.summary()


def test_sum_rate_consistency_with_predict():
    params = init_params(small_config(), seed=16)
    rng = np.random.default_rng(21)
    H, N = crand(rng, 4, 2, 1, 2), crand(rng, 4, 2, 1, 2)
    V = nn.predict(params, H, N, 0.1)
    E = nn.mse_var(H, ad.const(V), 0.1).value
    assert np.allclose(-np.log(E[..., 0, 0].real).sum(axis=-1), sum_rate(H, V, 0.1), atol=1e-10)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("per_user, with_cqi", [(False, False), (True, True)])
def test_checkpoint_roundtrip(tmp_path, per_user, with_cqi):
    params = init_params(small_config(per_user=per_user, cqi=with_cqi), seed=17)
    params.nets["U"].bn_state[0]["running_mean"][:] = 0.25
    if with_cqi:
        params.cqi_quantizer = ScalarQuantizer([0.5, 1.0, 2.0])
    path = tmp_path / "m.ckpt"
    nn.save_params(params, path)
    back = nn.load_params(path)
    assert back.names() == params.names()
    for n in params.names():
        assert np.array_equal(back.values[n], params.values[n])
    assert np.array_equal(back.nets["U"].bn_state[0]["running_mean"], params.nets["U"].bn_state[0]["running_mean"])
    assert back.w_identity == params.w_identity
    if with_cqi:
        assert np.array_equal(back.cqi_quantizer.levels, [0.5, 1.0, 2.0])
    rng = np.random.default_rng(22)
    H, N = crand(rng, 3, 2, 1, 2), crand(rng, 3, 2, 1, 2)
    assert np.array_equal(nn.predict(back, H, N, 0.1), nn.predict(params, H, N, 0.1))


def test_checkpoint_format_errors(tmp_path):
    params = init_params(small_config(), seed=18)
    path = tmp_path / "m.ckpt"
    nn.save_params(params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        nn.load_params(path)
    bad = bytearray(raw)
    bad[10:14] = struct.pack("<I", 99)
    path.write_bytes(bytes(bad))
    with pytest.raises(FormatError):
        nn.load_params(path)
    path.write_bytes(b"X" * len(raw))
    with pytest.raises(FormatError):
        nn.load_params(path)
