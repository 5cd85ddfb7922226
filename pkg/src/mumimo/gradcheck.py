"""Finite-difference gradient suite over every autodiff primitive and the
composed end-to-end loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _crand(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def primitive_cases(seed: int = 10) -> dict:
    """``name -> (f, params)``: one small loss per primitive."""
    rng0 = np.random.default_rng(seed)
    crand = _crand
    A33 = crand(rng0, 3, 3)
    B32 = crand(rng0, 3, 2)
    R34 = rng0.normal(size=(3, 4))
    HPD = A33 @ A33.conj().T + np.eye(3)
    C52 = crand(rng0, 5, 2)
    C23 = crand(rng0, 2, 3)

    cases = {
        "add": (lambda a, b: ad.sum(ad.abs2(a + b)), {"a": A33, "b": crand(rng0, 3, 3)}),
        "add_broadcast": (lambda a, b: ad.sum(ad.abs2(a + b)), {"a": R34, "b": rng0.normal(size=4)}),
        "sub": (lambda a, b: ad.sum(ad.abs2(a - b)), {"a": A33, "b": crand(rng0, 3, 3)}),
        "scale": (lambda a: ad.sum(ad.abs2(ad.scale(a, 2.5))), {"a": A33}),
        "mul_complex": (lambda a, b: ad.sum(ad.real(a * b)), {"a": A33, "b": crand(rng0, 3, 3)}),
        "mul_real_complex": (lambda a, b: ad.sum(ad.abs2(a * b)), {"a": R34[:, :3], "b": A33}),
        "div": (lambda a, b: ad.sum(ad.abs2(ad.div(a, b))), {"a": A33, "b": crand(rng0, 3, 3) + 3}),
        "sqrt": (lambda a: ad.sum(ad.sqrt(a)), {"a": np.abs(R34) + 0.5}),
        "neg_conj": (lambda a: ad.sum(ad.imag(ad.conj(-a))), {"a": A33}),
        "make_complex": (lambda x, y: ad.sum(ad.abs2(ad.make_complex(x, y) @ B32)), {"x": R34[:, :3], "y": R34[:, 1:]}),
        "matmul": (lambda a, b: ad.sum(ad.abs2(ad.matmul(a, b))), {"a": A33, "b": B32}),
        "matmul_real": (lambda a, b: ad.sum(ad.matmul(a, b)), {"a": R34, "b": rng0.normal(size=(4, 2))}),
        "hermitian": (lambda a: ad.sum(ad.real(ad.hermitian(a) @ B32)), {"a": A33}),
        "cinv": (lambda a: ad.sum(ad.abs2(ad.cinv(a))), {"a": HPD}),
        "relu": (lambda a: ad.sum(ad.abs2(ad.relu(a))), {"a": R34}),
        "where_mask": (lambda a: ad.sum(ad.abs2(ad.where_mask(a, R34[:, :3] > 0))), {"a": A33}),
        "batch_norm_train": (lambda x, g, b: ad.sum(ad.abs2(ad.batch_norm(x, g, b, {"running_mean": np.zeros(4), "running_var": np.ones(4)}, True)) * np.arange(4.0)),
                             {"x": rng0.normal(size=(6, 4)), "g": rng0.normal(size=4), "b": rng0.normal(size=4)}),
        "batch_norm_masked": (lambda x, g, b: ad.sum(ad.abs2(ad.batch_norm(x, g, b, {"running_mean": np.zeros(4), "running_var": np.ones(4)}, True, mask=np.array([1, 1, 0, 1, 0, 1]))) * np.arange(4.0)),
                              {"x": rng0.normal(size=(6, 4)), "g": rng0.normal(size=4), "b": rng0.normal(size=4)}),
        "batch_norm_infer": (lambda x, g, b: ad.sum(ad.abs2(ad.batch_norm(x, g, b, {"running_mean": np.ones(4), "running_var": 2 * np.ones(4)}, False))),
                             {"x": rng0.normal(size=(6, 4)), "g": rng0.normal(size=4), "b": rng0.normal(size=4)}),
        "row_normalize": (lambda a: ad.sum(ad.real(ad.row_normalize(a) @ B32)), {"a": crand(rng0, 2, 3)}),
        "fro_norm": (lambda a: ad.sum(ad.fro_norm(a)), {"a": crand(rng0, 2, 3, 3)}),
        "trace_real": (lambda a: ad.sum(ad.trace_real(a @ a)), {"a": A33}),
        "concat": (lambda a, b: ad.sum(ad.abs2(ad.concat([a, b], axis=-1) @ C52)), {"a": A33, "b": B32}),
        "getitem": (lambda a: ad.sum(ad.abs2(a[[0, 2, 0], :2])), {"a": A33}),
        "reshape_transpose": (lambda a: ad.sum(ad.real(ad.transpose(ad.reshape(a, (3, 1, 3)), (1, 2, 0)) * B32[:, :1].T[None])), {"a": A33}),
        "swapaxes": (lambda a: ad.sum(ad.real(ad.swapaxes(a) @ B32)), {"a": A33}),
        "mean": (lambda a: ad.mean(ad.abs2(a), axis=0)[1], {"a": A33}),
        "softpow_select": (lambda s: ad.sum(ad.softpow_select(s, 3.0) * np.arange(4.0)), {"s": np.abs(R34) + 0.1}),
        "complex_to_real": (lambda a: ad.sum(ad.complex_to_real(a) * np.arange(12.0)), {"a": crand(rng0, 2, 3)}),
        "real_to_complex": (lambda x: ad.sum(ad.real(ad.real_to_complex(x, 2, 3) * C23)),
                            {"x": rng0.normal(size=12)}),
    }
    return cases


def end_to_end_case(K: int = 2, N_t: int = 2, N_r: int = 1, B: int = 2, seed: int = 0,
                    cqi_mode: str = "none"):
    """Sum-MSE of the soft end-to-end forward as a function of every trainable tensor."""
    from . import neural as nn
    from .training import init_params

    cfg = nn.ModelConfig(K=K, N_t=N_t, N_r=N_r, B=B, hidden_G=(6,), hidden_D=(6,), hidden_U=(8,), hidden_W=(8,),
                         cqi=cqi_mode != "none")
    params = init_params(cfg, seed)
    params.w_identity = False
    rng = np.random.default_rng(seed + 1)
    H = _crand(rng, 4, K, N_r, N_t) / np.sqrt(2)
    noise = _crand(rng, 4, K, N_r, cfg.T_p) / np.sqrt(2)
    s2 = 0.1

    def loss(p):
        full = dict(params.values)
        full.update(p)
        V, _ = nn.end_to_end_forward(params, full, H, noise, s2, training=True, hard=False, cqi_mode=cqi_mode)
        return ad.sum(ad.trace_real(nn.mse_var(H, V, s2)))

    return loss, {n: params.values[n] for n in params.names()}


def run_suite(threshold: float = 1e-4, max_coords: int = 24) -> list[tuple[str, ad.GradCheckReport]]:
    out = []
    for name, (f, params) in sorted(primitive_cases().items()):
        out.append((name, ad.grad_check(lambda p, f=f: f(**p), params, threshold=threshold)))
    for mode in ("none", "full"):
        f, params = end_to_end_case(cqi_mode=mode)
        out.append((f"end_to_end[{mode}]", ad.grad_check(f, params, threshold=threshold, max_coords=max_coords)))
    return out
