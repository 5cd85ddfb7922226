"""Achievable rates, MSE matrices and the classical precoders.

Shapes used throughout (leading batch axes ``...`` are allowed everywhere):

* ``H``: ``(..., K, N_r, N_t)`` per-user channels
* ``V``: ``(..., N_t, K*N_r)`` combined precoder, block ``k`` is ``V[..., k*N_r:(k+1)*N_r]``
* ``sigma2``: scalar, ``(K,)`` or ``(..., K)`` noise variances

Rates are in nats; convert with :func:`mumimo.complex_tensor.nats_to_bits`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .complex_tensor import herm, inv, logdet_hpd_batch

__all__ = [
    "PrecodingMatrix", "WmmseState", "user_rates", "sum_rate", "mse_matrices",
    "rzf", "zf", "wmmse_step", "wmmse_solve", "power", "normalize_power",
]


@dataclass
class PrecodingMatrix:
    V: np.ndarray
    Es: float

    def blocks(self, n_r: int) -> np.ndarray:
        return split_blocks(self.V, n_r)


@dataclass
class WmmseState:
    U: np.ndarray  # (..., K, N_r, N_r)
    W: np.ndarray  # (..., K, N_r, N_r)
    V: np.ndarray  # (..., N_t, K*N_r)
    iteration: np.ndarray
    sum_rate_trace: list = field(default_factory=list)
    converged: np.ndarray | None = None

    @property
    def precoder(self) -> np.ndarray:
        return self.V


def _sigma(sigma2, K: int) -> np.ndarray:
    s = np.asarray(sigma2, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(K, float(s))
    return s


def split_blocks(V: np.ndarray, n_r: int) -> np.ndarray:
    """``(..., N_t, K*N_r)`` -> ``(..., K, N_t, N_r)``."""
    nt, knr = V.shape[-2:]
    K = knr // n_r
    return np.moveaxis(V.reshape(*V.shape[:-1], K, n_r), -2, -3)


def power(V: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(V) ** 2, axis=(-2, -1))


def normalize_power(V: np.ndarray, Es: float) -> np.ndarray:
    return V * np.sqrt(Es / power(V))[..., None, None]


def _cross_gains(H: np.ndarray, V: np.ndarray):
    """Returns ``S`` (..., K, N_r, N_r) own-signal blocks and ``HV`` (..., K, N_r, K*N_r)."""
    K, n_r = H.shape[-3], H.shape[-2]
    HV = H @ V[..., None, :, :]
    idx = np.arange(K)
    blocks = HV.reshape(*HV.shape[:-1], K, n_r)  # (..., K, N_r, K, N_r)
    S = blocks[..., idx, :, idx, :]  # (K, ..., N_r, N_r) after fancy indexing
    S = np.moveaxis(S, 0, -3)
    return S, HV


def _interference_cov(H, V, sigma2):
    K, n_r = H.shape[-3], H.shape[-2]
    S, HV = _cross_gains(H, V)
    s2 = _sigma(sigma2, K)
    C = HV @ herm(HV) + s2[..., :, None, None] * np.eye(n_r)
    Q = C - S @ herm(S)
    return S, Q, C


def _sinr_matrix(H, V, sigma2):
    S, Q, _ = _interference_cov(H, V, sigma2)
    n_r = H.shape[-2]
    M = np.eye(n_r) + herm(S) @ inv(Q) @ S
    return 0.5 * (M + herm(M))


def user_rates(H: np.ndarray, V: np.ndarray, sigma2) -> np.ndarray:
    """``R_k = log det(I + V_k^H H_k^H Q_k^-1 H_k V_k)`` for every user (nats)."""
    return logdet_hpd_batch(_sinr_matrix(H, V, sigma2))


def sum_rate(H: np.ndarray, V: np.ndarray, sigma2) -> np.ndarray:
    return user_rates(H, V, sigma2).sum(axis=-1)


def mse_matrices(H: np.ndarray, V: np.ndarray, sigma2) -> np.ndarray:
    """MMSE error matrices ``E_k = (I + V_k^H H_k^H Q_k^-1 H_k V_k)^-1``."""
    E = inv(_sinr_matrix(H, V, sigma2))
    return 0.5 * (E + herm(E))


def _stack(H: np.ndarray) -> np.ndarray:
    return H.reshape(*H.shape[:-3], H.shape[-3] * H.shape[-2], H.shape[-1])


def rzf(H: np.ndarray, Es: float, sigma2) -> np.ndarray:
    """``gamma * H^H (H H^H + beta I)^-1`` with ``beta = sum_k sigma_k^2 N_r / Es``."""
    K, n_r = H.shape[-3], H.shape[-2]
    beta = _sigma(sigma2, K).sum(axis=-1) * n_r / Es
    Hs = _stack(H)
    G = Hs @ herm(Hs) + np.asarray(beta)[..., None, None] * np.eye(K * n_r)
    return normalize_power(herm(Hs) @ inv(G), Es)


def zf(H: np.ndarray, Es: float) -> np.ndarray:
    """Zero forcing; raises ``SingularMatrixError`` for rank-deficient ``H``."""
    K, n_r, n_t = H.shape[-3:]
    if n_t < K * n_r:
        raise ValueError(f"zero forcing needs N_t >= K*N_r ({n_t} < {K * n_r})")
    Hs = _stack(H)
    return normalize_power(herm(Hs) @ inv(Hs @ herm(Hs)), Es)


def wmmse_step(H: np.ndarray, V: np.ndarray, Es: float, sigma2):
    """One sweep of receive filter, weight and precoder updates.

    Returns ``(U, W, V_new)``; ``W`` is the inverse MSE matrix of the input
    ``V`` and ``V_new`` meets ``Tr(V V^H) = Es``.
    """
    K, n_r = H.shape[-3], H.shape[-2]
    s2 = _sigma(sigma2, K)
    S, HV = _cross_gains(H, V)
    C = HV @ herm(HV) + s2[..., :, None, None] * np.eye(n_r)
    U = herm(S) @ inv(C)  # (..., K, N_r, N_r)
    W = inv(mse_matrices(H, V, sigma2))
    W = 0.5 * (W + herm(W))
    UH = U @ H  # (..., K, N_r, N_t)
    A = np.sum(herm(UH) @ W @ UH, axis=-3)
    beta = np.sum(s2 / Es * np.real(np.trace(W @ U @ herm(U), axis1=-2, axis2=-1)), axis=-1)
    A = A + np.asarray(beta)[..., None, None] * np.eye(H.shape[-1])
    T = herm(UH) @ W  # (..., K, N_t, N_r)
    T = np.moveaxis(T, -3, -2).reshape(*T.shape[:-3], H.shape[-1], K * n_r)
    Vt = inv(A) @ T
    return U, W, normalize_power(Vt, Es)


def wmmse_solve(H: np.ndarray, Es: float, sigma2, init: np.ndarray | None = None,
                tol: float = 1e-6, max_iter: int = 500) -> WmmseState:
    """Iterate :func:`wmmse_step` until the sum-rate changes by less than ``tol`` nats.

    ``H`` may carry one leading batch axis; each sample stops on its own.
    The returned ``sum_rate_trace`` is a list (one entry per sample) of
    sum-rates, starting with the rate of ``init``.  Samples that hit
    ``max_iter`` keep their best iterate and ``converged`` is False.
    """
    single = H.ndim == 3
    if single:
        H = H[None]
        if init is not None:
            init = init[None]
    n = H.shape[0]
    V = rzf(H, Es, sigma2) if init is None else np.array(init, dtype=np.complex128)
    s2 = _sigma(sigma2, H.shape[-3])
    s2b = np.broadcast_to(s2, (n,) + s2.shape[-1:])
    rate = sum_rate(H, V, s2b)
    traces = [[float(r)] for r in rate]
    best_V = V.copy()
    best_rate = rate.copy()
    K, n_r = H.shape[-3], H.shape[-2]
    U = np.zeros((n, K, n_r, n_r), dtype=np.complex128)
    W = np.zeros_like(U)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_iter):
        if active.size == 0:
            break
        u, w, v = wmmse_step(H[active], V[active], Es, s2b[active])
        new_rate = sum_rate(H[active], v, s2b[active])
        U[active], W[active], V[active] = u, w, v
        iters[active] += 1
        for j, i in enumerate(active):
            traces[i].append(float(new_rate[j]))
        better = new_rate > best_rate[active]
        best_V[active[better]] = v[better]
        best_rate[active[better]] = new_rate[better]
        done = np.abs(new_rate - rate[active]) < tol
        rate[active] = new_rate
        converged[active[done]] = True
        active = active[~done]
    V_out = np.where(converged[:, None, None], V, best_V)
    state = WmmseState(U=U, W=W, V=V_out, iteration=iters, sum_rate_trace=traces, converged=converged)
    if single:
        state = WmmseState(U=U[0], W=W[0], V=V_out[0], iteration=iters[0],
                           sum_rate_trace=traces[0], converged=bool(converged[0]))
    return state
