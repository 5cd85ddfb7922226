"""Learned forward passes: FC networks, pilots, user quantizer, dequantizer
and the WMMSE-structured BS network.

Parameters live in :class:`ParamSet` as a flat ``name -> ndarray`` map so
that the optimizer and the checkpoint writer can treat them uniformly.
Every forward function takes a mapping ``p`` from the same names to either
arrays or tape leaves (:class:`~mumimo.autodiff.Var`), so one code path
serves training and inference.

Array layout
------------
* ``H``, ``G``, ``H_bar``: ``(b, K, N_r, N_t)``
* pilot noise: ``(b, K, N_r, T_p)`` unit variance
* ``C``: ``(N_t, 2^B)`` shared, or ``(K, N_t, 2^B)`` per user
* ``V``: ``(b, N_t, K*N_r)``
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var
from .channels import FormatError, _read_exact
from .feedback import ScalarQuantizer

CKPT_MAGIC = b"MUMIMOCKPT"
CKPT_VERSION = 1
BETA_FLOOR = 1e-9
ROW_EPS = 1e-12


# ---------------------------------------------------------------------------
# configuration and parameter containers


@dataclass
class ModelConfig:
    K: int
    N_t: int
    N_r: int = 1
    T_p: int | None = None
    B: int = 4
    Es: float = 1.0
    Ep: float = 1.0
    hidden_G: tuple = ()
    hidden_D: tuple = ()
    hidden_U: tuple = ()
    hidden_W: tuple = ()
    per_user: bool = False
    cqi: bool = False

    def __post_init__(self):
        if self.T_p is None:
            self.T_p = self.N_t
        nn = self.N_t * self.N_r
        # Rayleigh defaults: one hidden layer 10*N_t*N_r for G/D, three layers
        # of 20 and 40 * N_t*N_r for U and W
        if not self.hidden_G:
            self.hidden_G = (10 * nn,)
        if not self.hidden_D:
            self.hidden_D = (10 * nn,)
        if not self.hidden_U:
            self.hidden_U = (20 * nn,) * 3
        if not self.hidden_W:
            self.hidden_W = (40 * nn,) * 3
        for name in ("hidden_G", "hidden_D", "hidden_U", "hidden_W"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if min(self.K, self.N_t, self.N_r, self.T_p) < 1:
            raise ValueError("K, N_t, N_r and T_p must be positive")
        if self.B < 1:
            raise ValueError("B must be >= 1")

    @property
    def M(self) -> int:
        return 2 ** self.B

    @property
    def alpha(self) -> float:
        return 1.5 * self.B

    def mmwave_sizes(self) -> "ModelConfig":
        """Hidden sizes used for the geometric mmWave channel."""
        return replace(self, hidden_G=(100,), hidden_D=(100,), hidden_U=(100,) * 3, hidden_W=(200,) * 3)


@dataclass
class FcNetwork:
    """Fully connected network; hidden layers are Linear -> BatchNorm -> ReLU,
    the output layer is linear.

    Weights are stored as ``(fan_in, fan_out)`` so a row batch computes
    ``x @ W + b``.  Parameter names are ``{name}.W{l}``, ``{name}.b{l}`` and,
    for hidden layers, ``{name}.gamma{l}`` / ``{name}.beta{l}``.
    """
    name: str
    sizes: tuple
    use_bn: bool = True
    bn_state: list = field(default_factory=list)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("network needs at least input and output sizes")
        if not self.bn_state and self.use_bn:
            self.bn_state = [{"running_mean": np.zeros(d), "running_var": np.ones(d)}
                             for d in self.sizes[1:-1]]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def param_shapes(self) -> list[tuple[str, tuple]]:
        out = []
        for l in range(self.n_layers):
            fi, fo = self.sizes[l], self.sizes[l + 1]
            out.append((f"{self.name}.W{l}", (fi, fo)))
            out.append((f"{self.name}.b{l}", (fo,)))
            if self.use_bn and l < self.n_layers - 1:
                out.append((f"{self.name}.gamma{l}", (fo,)))
                out.append((f"{self.name}.beta{l}", (fo,)))
        return out


FRONT_GROUP = "front"
BS_GROUP = "bs"


@dataclass
class ParamSet:
    """All trainable quantities of the end-to-end system plus BN statistics."""
    config: ModelConfig
    values: dict
    nets: dict
    cqi_quantizer: ScalarQuantizer | None = None
    # True while the BS network is in its initial stage (W network bypassed)
    w_identity: bool = False

    @classmethod
    def build(cls, config: ModelConfig) -> "ParamSet":
        c = config
        nets = {}
        user_nets = [f"{{}}{k}" for k in range(c.K)] if c.per_user else ["{}"]
        for tmpl in user_nets:
            g, d = tmpl.format("G"), tmpl.format("D")
            nets[g] = FcNetwork(g, (2 * c.N_r * c.T_p, *c.hidden_G, 2 * c.N_r * c.N_t))
            nets[d] = FcNetwork(d, (2 * c.N_t, *c.hidden_D, 2 * c.N_r * c.N_t))
        j_in = 2 * c.N_t * 2 * c.K * c.N_r
        out = 2 * c.N_r * c.K * c.N_r
        nets["U"] = FcNetwork("U", (j_in, *c.hidden_U, out))
        nets["W"] = FcNetwork("W", (j_in, *c.hidden_W, out))
        values = {
            "P": np.zeros((c.N_t, c.T_p), dtype=np.complex128),
            "C": np.zeros(((c.K,) if c.per_user else ()) + (c.N_t, c.M), dtype=np.complex128),
            "beta_theta": np.zeros(()),
        }
        for net in nets.values():
            for name, shape in net.param_shapes():
                if ".gamma" in name:
                    values[name] = np.ones(shape)
                else:
                    values[name] = np.zeros(shape)
        return cls(config, values, nets)

    def user_net_names(self, kind: str) -> list[str]:
        if self.config.per_user:
            return [f"{kind}{k}" for k in range(self.config.K)]
        return [kind]

    def names(self, group: str | None = None) -> list[str]:
        """Parameter names in checkpoint order, optionally restricted to a group."""
        front = ["P", "C"]
        for kind in ("G", "D"):
            for n in self.user_net_names(kind):
                front += [nm for nm, _ in self.nets[n].param_shapes()]
        bs = ["beta_theta"]
        for n in ("U", "W"):
            bs += [nm for nm, _ in self.nets[n].param_shapes()]
        if group == FRONT_GROUP:
            return front
        if group == BS_GROUP:
            return bs
        return front + bs

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.values.items()},
                        copy.deepcopy(self.nets), self.cqi_quantizer, self.w_identity)

    def net_names(self, group: str | None = None) -> list[str]:
        front = self.user_net_names("G") + self.user_net_names("D")
        if group == FRONT_GROUP:
            return front
        if group == BS_GROUP:
            return ["U", "W"]
        return front + ["U", "W"]


@dataclass
class FeedbackMessage:
    """Per-user feedback for a batch: hard index, soft weights and CQI."""
    index: np.ndarray  # (b, K) int
    weights: np.ndarray  # (b, K, 2^B)
    cqi: np.ndarray | None = None  # (b, K)

    def __post_init__(self):
        w = np.asarray(self.weights)
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1) > 1e-9):
            raise ContractError("soft weights must be nonnegative and sum to one")


def _p(p: Mapping, name: str) -> Var:
    v = p[name]
    return v if isinstance(v, Var) else ad.const(v)


# ---------------------------------------------------------------------------
# building blocks


def fc_forward(net: FcNetwork, x, p: Mapping, training: bool, mask: np.ndarray | None = None) -> Var:
    """Forward pass of ``net`` on ``x`` of shape ``(..., sizes[0])``.

    Complex ``x`` of shape ``(..., m, n)`` is packed to real first.  ``mask``
    selects the rows that contribute to batch statistics.
    """
    x = x if isinstance(x, Var) else ad.const(x)
    if np.iscomplexobj(x.value):
        x = ad.complex_to_real(x)
    if x.value.shape[-1] != net.sizes[0]:
        raise ad.DimensionError(f"{net.name}: expected input width {net.sizes[0]}, got {x.value.shape[-1]}")
    h = x
    last = net.n_layers - 1
    for l in range(net.n_layers):
        h = ad.matmul(h, _p(p, f"{net.name}.W{l}")) + _p(p, f"{net.name}.b{l}")
        if l < last:
            if net.use_bn:
                h = ad.batch_norm(h, _p(p, f"{net.name}.gamma{l}"), _p(p, f"{net.name}.beta{l}"),
                                  net.bn_state[l], training, mask=mask)
            h = ad.relu(h)
    return h


def _per_user(params: ParamSet, kind: str, x: Var, p: Mapping, training: bool, mask) -> Var:
    """Apply the (shared or per-user) network ``kind`` to ``x`` of shape (b, K, d)."""
    names = params.user_net_names(kind)
    if len(names) == 1:
        return fc_forward(params.nets[names[0]], x, p, training, mask)
    outs = []
    for k, n in enumerate(names):
        mk = None if mask is None else mask[:, k]
        outs.append(ad.reshape(fc_forward(params.nets[n], x[:, k], p, training, mk),
                               (x.value.shape[0], 1, -1)))
    return ad.concat(outs, axis=1)


def pilot_forward(P, H, noise, sigma2) -> Var:
    """``Y_k = H_k P + sigma_k N_k`` with unit-variance ``noise``."""
    P = P if isinstance(P, Var) else ad.const(P)
    H = H if isinstance(H, Var) else ad.const(H)
    if H.value.shape[-1] != P.value.shape[0]:
        raise ad.DimensionError(f"H has {H.value.shape[-1]} columns, P has {P.value.shape[0]} rows")
    noise = np.asarray(noise)
    if noise.shape[-1] != P.value.shape[1] or noise.shape[-2] != H.value.shape[-2]:
        raise ad.DimensionError(f"noise shape {noise.shape} does not match N_r x T_p")
    K = H.value.shape[-3]
    s = np.sqrt(np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (K,)))
    return ad.matmul(H, P) + ad.const(s[:, None, None] * noise)


def correlations(Gbar: Var, C) -> Var:
    """``s_l = ||G_bar c_l||^2`` for every codeword, shape (b, K, 2^B)."""
    C = C if isinstance(C, Var) else ad.const(C)
    Cv = C if C.value.ndim == 2 else ad.reshape(C, (1,) + C.value.shape)
    return ad.sum(ad.abs2(ad.matmul(Gbar, Cv)), axis=-2)


def user_forward(params: ParamSet, p: Mapping, Y: Var, alpha: float, training: bool,
                 mask: np.ndarray | None = None):
    """User DNN, row normalisation and soft/hard codeword selection.

    Returns ``(G, G_bar, e, idx, degenerate)`` where ``e`` is the soft weight
    Var and ``idx`` the hard indices (lowest index on ties).
    """
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    c = params.config
    b = Y.value.shape[0]
    x = ad.complex_to_real(Y)  # (b, K, 2*N_r*T_p)
    g = _per_user(params, "G", x, p, training, mask)
    G = ad.real_to_complex(g, c.N_r, c.N_t)
    row_nrm = np.sqrt(np.sum(np.abs(G.value) ** 2, axis=-1))
    degenerate = np.any(row_nrm < ROW_EPS, axis=-1)
    Gbar = ad.row_normalize(G, ROW_EPS)
    s = correlations(Gbar, _p(p, "C"))
    e = ad.softpow_select(s, alpha)
    idx = np.argmax(s.value, axis=-1)
    assert idx.shape == (b, c.K)
    return G, Gbar, e, idx, degenerate


def one_hot(idx: np.ndarray, M: int) -> np.ndarray:
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= M):
        raise ContractError(f"feedback index out of range [0, {M})")
    return (idx[..., None] == np.arange(M)).astype(np.float64)


def dequantize(params: ParamSet, p: Mapping, e, idx: np.ndarray | None, hard: bool, training: bool,
               cqi=None, mask: np.ndarray | None = None) -> Var:
    """Codeword recovery and the dequantizer DNN.

    ``hard`` uses the one-hot of ``idx``; otherwise ``c = C e``.  ``cqi``
    (shape (b, K), Var or array) scales the codeword before the network.
    """
    c = params.config
    w = ad.const(one_hot(idx, c.M)) if hard else (e if isinstance(e, Var) else ad.const(e))
    C = _p(p, "C")
    Cv = C if C.value.ndim == 2 else ad.reshape(C, (1,) + C.value.shape)
    cw = ad.matmul(Cv, ad.reshape(w, w.value.shape + (1,)))  # (b, K, N_t, 1)
    if cqi is not None:
        q = cqi if isinstance(cqi, Var) else ad.const(np.asarray(cqi, dtype=np.float64))
        cw = cw * ad.reshape(q, q.value.shape + (1, 1))
    x = ad.complex_to_real(cw)  # (b, K, 2*N_t)
    h = _per_user(params, "D", x, p, training, mask)
    return ad.real_to_complex(h, c.N_r, c.N_t)


def _stack(H: Var) -> Var:
    b, K, n_r, n_t = H.value.shape
    return ad.reshape(H, (b, K * n_r, n_t))


def rzf_var(H: Var, Es: float, sigma2: np.ndarray) -> Var:
    """Differentiable RZF; ``sigma2`` is (b, K) with zeros for absent users."""
    b, K, n_r, n_t = H.value.shape
    beta = np.sum(sigma2, axis=-1) * n_r / Es
    Hs = _stack(H)
    G = ad.matmul(Hs, ad.hermitian(Hs)) + ad.const(beta[:, None, None] * np.eye(K * n_r))
    T = ad.matmul(ad.hermitian(Hs), ad.cinv(G))
    return power_normalize(T, Es)


def power_normalize(T: Var, Es: float) -> Var:
    # the tiny offset maps an all-zero precoder to zero instead of NaN
    pw = ad.sum(ad.abs2(T), axis=(-2, -1)) + ad.const(1e-300)
    g = ad.sqrt(ad.scale(ad.div(ad.const(np.ones_like(pw.value)), pw), Es))
    return T * ad.reshape(g, g.value.shape + (1, 1))


def _blocks(X: Var, K: int, n_r: int) -> Var:
    """``(b, N_r, K*N_r)`` network output -> per-user ``(b, K, N_r, N_r)``."""
    b = X.value.shape[0]
    return ad.transpose(ad.reshape(X, (b, n_r, K, n_r)), (0, 2, 1, 3))


def _sigma_bk(sigma2, b: int, K: int, active: np.ndarray | None) -> np.ndarray:
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (K,))
    s2 = np.broadcast_to(s2, (b, K)).copy()
    if active is not None:
        s2 = s2 * active
    return s2


def bs_forward(params: ParamSet, p: Mapping, H_in, Es: float, sigma2, training: bool,
               active: np.ndarray | None = None, w_identity: bool | None = None,
               W_override=None, U_override=None) -> tuple[Var, dict]:
    """WMMSE-structured BS network.

    Builds ``J = [H^H, V_RZF]``, maps it to ``W_k = W_hat W_hat^H + I`` and
    ``U_k`` and returns ``V = gamma (sum_k H_k^H U_k^H W_k U_k H_k +
    (beta + beta_theta^2) I)^-1 [H_1^H U_1^H W_1, ...]`` with
    ``Tr(V V^H) = Es``.  ``beta = sum_k sigma_k^2/Es Tr(W_k U_k U_k^H)``.

    ``w_identity`` bypasses the W network (``W_k = I``; defaults to
    ``params.w_identity``); ``W_override`` and
    ``U_override`` inject fixed matrices (used for cross-checks).
    """
    c = params.config
    w_identity = params.w_identity if w_identity is None else w_identity
    H = H_in if isinstance(H_in, Var) else ad.const(H_in)
    b, K, n_r, n_t = H.value.shape
    if n_t != c.N_t or n_r != c.N_r or K != c.K:
        raise ad.DimensionError(f"bs_forward expects (b, {c.K}, {c.N_r}, {c.N_t}), got {H.value.shape}")
    s2 = _sigma_bk(sigma2, b, K, active)
    V_rzf = rzf_var(H, Es, s2)
    J = ad.concat([ad.hermitian(_stack(H)), V_rzf], axis=-1)  # (b, N_t, 2*K*N_r)
    x = ad.complex_to_real(J)
    eye = np.eye(n_r)
    if W_override is not None:
        W = ad.const(W_override)
    elif w_identity:
        W = ad.const(np.broadcast_to(eye, (b, K, n_r, n_r)).astype(np.complex128))
    else:
        What = _blocks(ad.real_to_complex(fc_forward(params.nets["W"], x, p, training), n_r, K * n_r), K, n_r)
        W = ad.matmul(What, ad.hermitian(What)) + ad.const(eye)
    if U_override is not None:
        U = ad.const(U_override)
    else:
        U = _blocks(ad.real_to_complex(fc_forward(params.nets["U"], x, p, training), n_r, K * n_r), K, n_r)
    UH = ad.matmul(U, H)  # (b, K, N_r, N_t)
    T = ad.matmul(ad.hermitian(UH), W)  # (b, K, N_t, N_r)
    A = ad.sum(ad.matmul(T, UH), axis=1)  # (b, N_t, N_t)
    tr = ad.trace_real(ad.matmul(W, ad.matmul(U, ad.hermitian(U))))  # (b, K)
    beta = ad.sum(tr * ad.const(s2 / Es), axis=-1)
    reg = beta + ad.abs2(_p(p, "beta_theta"))
    low = reg.value < BETA_FLOOR
    if np.any(low):
        reg = ad.where_mask(reg, ~low) + ad.const(np.where(low, BETA_FLOOR, 0.0))
    A = A + ad.reshape(reg, (b, 1, 1)) * ad.const(np.eye(n_t))
    Tcat = ad.reshape(ad.transpose(T, (0, 2, 1, 3)), (b, n_t, K * n_r))
    Vt = ad.matmul(ad.cinv(A), Tcat)
    if active is not None:
        col = np.repeat(np.asarray(active, dtype=bool), n_r, axis=-1)[:, None, :]
        Vt = ad.where_mask(Vt, col)
    V = power_normalize(Vt, Es)
    return V, {"W": W, "U": U, "beta": beta, "V_rzf": V_rzf}


def mse_var(H, V: Var, sigma2) -> Var:
    """Differentiable MSE matrices ``E_k`` (b, K, N_r, N_r) of precoder ``V`` on channel ``H``."""
    H = H if isinstance(H, Var) else ad.const(H)
    b, K, n_r, n_t = H.value.shape
    s2 = _sigma_bk(sigma2, b, K, None)
    Vb = ad.transpose(ad.reshape(V, (b, n_t, K, n_r)), (0, 2, 1, 3))  # (b, K, N_t, N_r)
    S = ad.matmul(H, Vb)  # own-signal blocks
    HV = ad.matmul(H, ad.reshape(V, (b, 1, n_t, K * n_r)))  # (b, K, N_r, K*N_r)
    eye = np.eye(n_r)
    Q = ad.matmul(HV, ad.hermitian(HV)) - ad.matmul(S, ad.hermitian(S)) + ad.const(s2[..., None, None] * eye)
    M = ad.matmul(ad.hermitian(S), ad.matmul(ad.cinv(Q), S)) + ad.const(eye)
    return ad.cinv(M)


# ---------------------------------------------------------------------------
# composition


def mask_users(H_full: np.ndarray, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero the channel blocks of inactive users.

    ``active`` is a boolean (b, K_max) array or a 1-D list of active indices
    applied to every sample.  Returns ``(H_masked, active_bool)``.
    """
    b, K = H_full.shape[:2]
    active = np.asarray(active)
    if active.dtype != bool:
        m = np.zeros(K, dtype=bool)
        m[active] = True
        active = np.broadcast_to(m, (b, K))
    active = np.broadcast_to(active, (b, K)).copy()
    if np.any(~active.any(axis=1)):
        raise ContractError("every sample needs at least one active user")
    return H_full * active[:, :, None, None], active


def front_forward(params: ParamSet, p: Mapping, H, noise, sigma2, training: bool, hard: bool,
                  alpha: float | None = None, active: np.ndarray | None = None,
                  cqi_mode: str = "none", pilot_sigma2=None) -> tuple[Var, dict]:
    """Pilots -> user DNN -> (soft|hard) feedback -> dequantizer.

    ``cqi_mode`` is ``none``, ``full`` (exact ``||G_k||_F``) or ``quant``
    (the ParamSet's scalar quantizer).  Returns ``H_bar`` with inactive
    users zeroed, plus diagnostics ``G``, ``G_bar``, ``e``, ``idx``, ``cqi``.
    """
    c = params.config
    alpha = c.alpha if alpha is None else alpha
    H = H if isinstance(H, Var) else ad.const(H)
    ps2 = sigma2 if pilot_sigma2 is None else pilot_sigma2
    Y = pilot_forward(_p(p, "P"), H, noise, ps2)
    G, Gbar, e, idx, degenerate = user_forward(params, p, Y, alpha, training, active)
    cqi = None
    if cqi_mode == "full":
        cqi = ad.fro_norm(G)
    elif cqi_mode == "quant":
        if params.cqi_quantizer is None:
            raise ContractError("quantized CQI requested but no CQI quantizer is fitted")
        cqi = params.cqi_quantizer(np.sqrt(np.sum(np.abs(G.value) ** 2, axis=(-2, -1))))
    elif cqi_mode != "none":
        raise ContractError(f"unknown cqi mode {cqi_mode!r}")
    Hbar = dequantize(params, p, e, idx, hard, training, cqi, active)
    if active is not None:
        Hbar = ad.where_mask(Hbar, np.asarray(active, dtype=bool)[:, :, None, None])
    return Hbar, dict(G=G, G_bar=Gbar, e=e, idx=idx, degenerate=degenerate, cqi=cqi)


def end_to_end_forward(params: ParamSet, p: Mapping, H, noise, sigma2, training: bool,
                       hard: bool | None = None, alpha: float | None = None,
                       active: np.ndarray | None = None, cqi_mode: str = "none",
                       bypass_quantizer: bool = False, w_identity: bool | None = None,
                       pilot_sigma2=None) -> tuple[Var, dict]:
    """Full map from channels and pilot noise to the precoder.

    ``hard`` defaults to ``not training``.  ``bypass_quantizer`` feeds the
    true ``H`` to the BS network (perfect CSIT).  Diagnostics hold the
    front-end quantities of :func:`front_forward`, ``H_bar`` and the BS
    internals.
    """
    c = params.config
    hard = (not training) if hard is None else hard
    H = H if isinstance(H, Var) else ad.const(H)
    diag: dict = {}
    if bypass_quantizer:
        Hbar = H
        if active is not None:
            Hbar = ad.where_mask(Hbar, np.asarray(active, dtype=bool)[:, :, None, None])
    else:
        Hbar, diag = front_forward(params, p, H, noise, sigma2, training, hard, alpha, active,
                                   cqi_mode, pilot_sigma2)
    V, bs = bs_forward(params, p, Hbar, c.Es, sigma2, training, active=active, w_identity=w_identity)
    diag.update(H_bar=Hbar, **bs)
    return V, diag


def feedback_message(diag: dict) -> FeedbackMessage:
    cqi = diag.get("cqi")
    if isinstance(cqi, Var):
        cqi = cqi.value
    return FeedbackMessage(index=diag["idx"], weights=diag["e"].value, cqi=cqi)


def predict(params: ParamSet, H: np.ndarray, noise: np.ndarray | None, sigma2, chunk: int = 2048,
            **kw) -> np.ndarray:
    """Inference-mode precoders ``(n, N_t, K*N_r)`` computed in chunks.

    ``kw`` is forwarded to :func:`end_to_end_forward` (for example
    ``bypass_quantizer=True`` for a perfect-CSIT BS network).
    """
    p = params.values
    active = kw.pop("active", None)
    out = []
    for s in range(0, H.shape[0], chunk):
        nz = None if noise is None else noise[s:s + chunk]
        act = None if active is None else active[s:s + chunk]
        V, _ = end_to_end_forward(params, p, H[s:s + chunk], nz, sigma2, training=False, active=act, **kw)
        out.append(V.value)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian): magic "MUMIMOCKPT", u32 version, u32 K, N_t, N_r,
# T_p, B, per_user, cqi, w_identity, f64 Es, Ep, then for each network in the order
# G.., D.., U, W: u32 layer count L and L+1 u32 sizes.  Then every parameter
# of ParamSet.names() in order (complex tensors as interleaved re/im f64),
# followed for each network by running_mean/running_var per hidden layer,
# and finally u32 n_levels + f64 CQI quantizer levels (0 if absent).


def save_params(params: ParamSet, path) -> None:
    c = params.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<9I", CKPT_VERSION, c.K, c.N_t, c.N_r, c.T_p, c.B, int(c.per_user), int(c.cqi),
                             int(params.w_identity)))
        fh.write(struct.pack("<2d", c.Es, c.Ep))
        for n in params.net_names():
            sizes = params.nets[n].sizes
            fh.write(struct.pack(f"<I{len(sizes)}I", len(sizes) - 1, *sizes))
        for name in params.names():
            fh.write(_pack(params.values[name]))
        for n in params.net_names():
            for st in params.nets[n].bn_state:
                fh.write(np.asarray(st["running_mean"], dtype="<f8").tobytes())
                fh.write(np.asarray(st["running_var"], dtype="<f8").tobytes())
        q = params.cqi_quantizer
        levels = np.zeros(0) if q is None else q.levels
        fh.write(struct.pack("<I", len(levels)))
        fh.write(np.asarray(levels, dtype="<f8").tobytes())


def _pack(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        flat = a.reshape(-1)
        out = np.empty(2 * flat.size, dtype="<f8")
        out[0::2], out[1::2] = flat.real, flat.imag
        return out.tobytes()
    return np.asarray(a, dtype="<f8").tobytes()


def _unpack(fh, shape, is_complex: bool, what: str) -> np.ndarray:
    count = int(np.prod(shape)) * (2 if is_complex else 1)
    arr = np.frombuffer(_read_exact(fh, 8 * count, what), dtype="<f8").astype(np.float64)
    if is_complex:
        return (arr[0::2] + 1j * arr[1::2]).reshape(shape)
    return arr.reshape(shape)


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CKPT_MAGIC), "magic")
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version: expected {CKPT_VERSION}, found {version}")
        K, N_t, N_r, T_p, B, per_user, cqi, w_id = struct.unpack("<8I", _read_exact(fh, 32, "header"))
        Es, Ep = struct.unpack("<2d", _read_exact(fh, 16, "power levels"))
        n_nets = 2 * (K if per_user else 1) + 2
        sizes = []
        for _ in range(n_nets):
            (L,) = struct.unpack("<I", _read_exact(fh, 4, "layer count"))
            sizes.append(struct.unpack(f"<{L + 1}I", _read_exact(fh, 4 * (L + 1), "layer sizes")))
        nu = K if per_user else 1
        cfg = ModelConfig(K=K, N_t=N_t, N_r=N_r, T_p=T_p, B=B, Es=Es, Ep=Ep,
                          hidden_G=sizes[0][1:-1], hidden_D=sizes[nu][1:-1],
                          hidden_U=sizes[-2][1:-1], hidden_W=sizes[-1][1:-1],
                          per_user=bool(per_user), cqi=bool(cqi))
        params = ParamSet.build(cfg)
        params.w_identity = bool(w_id)
        for n, s in zip(params.net_names(), sizes):
            if params.nets[n].sizes != tuple(s):
                raise FormatError(f"network {n}: layer sizes {s} inconsistent with the config")
        for name in params.names():
            ref = params.values[name]
            params.values[name] = _unpack(fh, ref.shape, np.iscomplexobj(ref), name)
        for n in params.net_names():
            for st in params.nets[n].bn_state:
                d = st["running_mean"].shape
                st["running_mean"] = _unpack(fh, d, False, f"{n} running mean")
                st["running_var"] = _unpack(fh, d, False, f"{n} running variance")
        (nl,) = struct.unpack("<I", _read_exact(fh, 4, "quantizer size"))
        if nl:
            params.cqi_quantizer = ScalarQuantizer(_unpack(fh, (nl,), False, "quantizer levels"))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return params
