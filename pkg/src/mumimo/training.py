"""Optimisation: Adam, initialisation, losses, projections and the training
policies (multi-stage BS training, end-to-end training, scalable user
count and CQI fine-tuning).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import neural as nn
from .channels import ChannelConfig, apply_pathloss, gen_mmwave
from .classic import mse_matrices, power, sum_rate
from .complex_tensor import herm, nats_to_bits
from .feedback import ScalarQuantizer, lloyd_scalar_train
from .rng import STREAM_INIT, STREAM_MISC, STREAM_TRAIN, STREAM_VALID, complex_normal, make_rng

LOG_COLUMNS = ["stage", "epoch", "loss", "r1", "r2", "val_sum_rate_bits", "lr", "wall_ms"]
EIG_FLOOR = 1e-9


class TrainingError(RuntimeError):
    """Non-finite values or a violated invariant during training."""


class ProjectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule, channel source, log


@dataclass
class TrainSchedule:
    epochs_init: int = 2000
    epochs_per_stage: int = 500
    stages_max: int = 10
    batch_size: int = 256
    samples_per_epoch: int = 1000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    alpha: float | None = None  # None -> 1.5 * B
    lambda1: float = 0.1
    lambda2: float = 1.0
    seed: int = 0
    n_val: int = 10000
    val_every: int = 50
    conv_tol: float = 0.005
    debug_gradcheck: float = 0.0  # fraction of steps that run a sampled grad check

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ValueError("learning rate must decay (lr_end <= lr_start)")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch normalisation")

    @classmethod
    def full_scale(cls, **kw) -> "TrainSchedule":
        return cls(epochs_init=20000, epochs_per_stage=5000, **kw)

    def lr(self, epoch: int, n_epochs: int) -> float:
        """Exponential decay from ``lr_start`` (first epoch) to ``lr_end`` (last)."""
        if n_epochs <= 1:
            return self.lr_start
        return self.lr_start * (self.lr_end / self.lr_start) ** (epoch / (n_epochs - 1))

    def batches(self) -> list[int]:
        n, b = self.samples_per_epoch, self.batch_size
        sizes = [b] * (n // b)
        if n % b:
            sizes.append(n % b)
        # a trailing batch of one would break batch statistics
        if len(sizes) > 1 and sizes[-1] < 2:
            tail = sizes.pop()
            sizes[-1] += tail
        return sizes


@dataclass
class ChannelSource:
    """Fresh channel draws for training and validation."""
    K: int
    N_t: int
    N_r: int = 1
    kind: str = "rayleigh"  # rayleigh | mmwave | pathloss
    n_paths: int = 4
    d0: float = 30.0
    delta: float = 3.0
    radius: float = 100.0

    def __post_init__(self):
        if self.kind not in ("rayleigh", "mmwave", "pathloss"):
            raise ValueError(f"unknown channel kind {self.kind!r}")

    def sample(self, rng, n: int) -> np.ndarray:
        cfg = ChannelConfig(self.K, self.N_t, self.N_r)
        if self.kind == "mmwave":
            return gen_mmwave(cfg, self.n_paths, n, 0, rng=rng).H
        H = complex_normal(rng, (n, self.K, self.N_r, self.N_t))
        if self.kind == "pathloss":
            from .channels import ChannelBatch
            H = apply_pathloss(ChannelBatch(H, 1.0), self.d0, self.delta, self.radius, 0, rng=rng).H
        return H


def uniform_active_sampler(K_max: int, k_lo: int, k_hi: int) -> Callable:
    """Per sample: user count uniform in ``[k_lo, k_hi]``, then a uniformly random subset."""
    if not 1 <= k_lo <= k_hi <= K_max:
        raise ValueError(f"user range [{k_lo}, {k_hi}] must lie in [1, {K_max}]")

    def draw(rng, n: int) -> np.ndarray:
        counts = rng.integers(k_lo, k_hi + 1, size=n)
        ranks = np.argsort(np.argsort(rng.random((n, K_max)), axis=1), axis=1)
        return ranks < counts[:, None]

    return draw


def first_k_active(n: int, K_max: int, k: int) -> np.ndarray:
    a = np.zeros((n, K_max), dtype=bool)
    a[:, :k] = True
    return a


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)

    def add(self, stage, epoch, loss, r1=math.nan, r2=math.nan, val=math.nan, lr=math.nan):
        self.rows.append(dict(stage=stage, epoch=epoch, loss=loss, r1=r1, r2=r2, val_sum_rate_bits=val,
                              lr=lr, wall_ms=(time.perf_counter() - self.t0) * 1e3))

    def write_csv(self, path, include_wall: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                row = []
                for c in LOG_COLUMNS:
                    v = r[c]
                    if c == "wall_ms" and not include_wall:
                        v = math.nan
                    row.append("" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v))
                w.writerow(row)


# ---------------------------------------------------------------------------
# initialisation and optimiser


def xavier_init(params: nn.ParamSet, seed: int, nets: list[str] | None = None,
                out_scale: dict | None = None) -> nn.ParamSet:
    """Uniform Xavier weights, zero biases, unit BN scale, reset BN statistics.

    ``out_scale`` maps a network name to a factor applied to its output
    layer (used to start the W network close to the identity offset).
    """
    rng = make_rng(seed, STREAM_INIT)
    out_scale = out_scale or {}
    for n in (nets or params.net_names()):
        net = params.nets[n]
        for l in range(net.n_layers):
            fi, fo = net.sizes[l], net.sizes[l + 1]
            lim = math.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-lim, lim, size=(fi, fo))
            if l == net.n_layers - 1:
                w = w * out_scale.get(n, 1.0)
            params.values[f"{n}.W{l}"] = w
            params.values[f"{n}.b{l}"] = np.zeros(fo)
            if net.use_bn and l < net.n_layers - 1:
                params.values[f"{n}.gamma{l}"] = np.ones(fo)
                params.values[f"{n}.beta{l}"] = np.zeros(fo)
        for st in net.bn_state:
            st["running_mean"] = np.zeros_like(st["running_mean"])
            st["running_var"] = np.ones_like(st["running_var"])
    return params


def init_params(config: nn.ModelConfig, seed: int) -> nn.ParamSet:
    """Fresh ParamSet: Xavier networks, random feasible pilots and codebook."""
    params = nn.ParamSet.build(config)
    xavier_init(params, seed, out_scale={"W": 0.1})
    rng = make_rng(seed, STREAM_MISC)
    c = config
    params.values["P"] = project_pilot(complex_normal(rng, (c.N_t, c.T_p)), c.T_p, c.Ep)
    params.values["C"] = project_codebook(complex_normal(rng, params.values["C"].shape))
    params.values["beta_theta"] = np.array(0.01)
    params.w_identity = True
    return params


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, values: dict, names) -> "AdamState":
        m = {n: np.zeros_like(values[n]) for n in names}
        v = {n: np.zeros_like(values[n]) for n in names}
        return cls(m, v)


def adam_step(state: AdamState, params: dict, grads: dict, eta: float) -> None:
    """Bias-corrected Adam update of ``params`` in place (new arrays are stored).

    Complex parameters are handled as independent real and imaginary parts.
    Parameters without a gradient entry are left alone.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name in state.m:
        g = grads.get(name)
        if g is None:
            continue
        m = b1 * state.m[name] + (1 - b1) * g
        if np.iscomplexobj(g) or np.iscomplexobj(state.v[name]):
            g2 = g.real ** 2 + 1j * g.imag ** 2
            v = b2 * state.v[name] + (1 - b2) * g2
            mh, vh = m / c1, v / c2
            step = mh.real / (np.sqrt(vh.real) + state.eps) + 1j * (mh.imag / (np.sqrt(vh.imag) + state.eps))
        else:
            v = b2 * state.v[name] + (1 - b2) * g * g
            step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - eta * step


# ---------------------------------------------------------------------------
# losses and projections


def _masked_user_sum(x: ad.Var, active) -> ad.Var:
    if active is not None:
        x = x * ad.const(np.asarray(active, dtype=np.float64))
    return ad.mean(ad.sum(x, axis=-1))


def loss_weighted_mse(W_frozen, H, V, sigma2, active=None) -> ad.Var:
    """Batch mean of ``sum_k Tr(W_k E_k(H_k, V))``; ``W_frozen=None`` means identity."""
    E = nn.mse_var(H, V, sigma2)
    WE = E if W_frozen is None else ad.matmul(ad.const(W_frozen), E)
    return _masked_user_sum(ad.trace_real(WE), active)


def loss_r1(H, G, active=None) -> ad.Var:
    """Batch mean of ``sum_k ||H_k - G_k||_F^2``."""
    H = H if isinstance(H, ad.Var) else ad.const(H)
    G = G if isinstance(G, ad.Var) else ad.const(G)
    d = ad.sum(ad.abs2(H - G), axis=(-2, -1))
    return _masked_user_sum(d, active)


def loss_r2(Gbar, C, idx, active=None) -> ad.Var:
    """Negative batch mean of ``sum_k ||G_bar_k c_{i_k}||^2``."""
    Gbar = Gbar if isinstance(Gbar, ad.Var) else ad.const(Gbar)
    s = nn.correlations(Gbar, C)  # (b, K, M)
    b, K = s.value.shape[:2]
    picked = ad.getitem(s, (np.arange(b)[:, None], np.arange(K)[None, :], np.asarray(idx)))
    return ad.neg(_masked_user_sum(picked, active))


def project_pilot(P: np.ndarray, T_p: int, Ep: float) -> np.ndarray:
    tr = float(np.sum(np.abs(P) ** 2))
    if tr == 0 or not math.isfinite(tr):
        raise ProjectionError("cannot project a zero or non-finite pilot matrix")
    return P * math.sqrt(T_p * Ep / tr)


def project_codebook(C: np.ndarray) -> np.ndarray:
    """Normalise every codeword (column, axis -2) to unit norm."""
    nrm = np.sqrt(np.sum(np.abs(C) ** 2, axis=-2, keepdims=True))
    if np.any(nrm == 0) or not np.all(np.isfinite(nrm)):
        raise ProjectionError("codebook has a zero or non-finite codeword")
    return C / nrm


def tangent_grads(values: dict, grads: dict) -> dict:
    """Drop the radial part of the pilot and codeword gradients.

    ``P`` lives on a Frobenius sphere and each codeword on a unit sphere;
    the radial component is undone by the projection anyway, but Adam's
    per-coordinate scaling would first turn it into a spurious tangential
    step.  Other entries pass through unchanged.
    """
    out = dict(grads)
    if "P" in grads:
        P, g = values["P"], grads["P"]
        out["P"] = g - np.real(np.vdot(P, g)) / np.real(np.vdot(P, P)) * P
    if "C" in grads:
        C, g = values["C"], grads["C"]
        out["C"] = g - np.real(np.sum(np.conj(C) * g, axis=-2, keepdims=True)) * C
    return out


def frozen_weights(E: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """``E^-1`` with eigenvalues of ``E`` floored at ``floor``."""
    E = 0.5 * (E + herm(E))
    w, U = np.linalg.eigh(E)
    w = np.maximum(w, floor)
    Winv = (U / w[..., None, :]) @ herm(U)
    return 0.5 * (Winv + herm(Winv))


# ---------------------------------------------------------------------------
# evaluation helpers


@dataclass
class ValidationSet:
    H: np.ndarray
    noise: np.ndarray
    active: np.ndarray | None = None


def make_validation(source: ChannelSource, n: int, seed: int, T_p: int,
                    active_sampler: Callable | None = None) -> ValidationSet:
    rng = make_rng(seed, STREAM_VALID)
    H = source.sample(rng, n)
    noise = complex_normal(rng, (n, source.K, source.N_r, T_p))
    active = None if active_sampler is None else active_sampler(rng, n)
    return ValidationSet(H, noise, active)


def evaluate_rate(params: nn.ParamSet, H, noise, sigma2, perfect: bool = False, cqi_mode: str = "none",
                  active=None, per_sample: bool = False):
    """Average sum-rate in bits/s/Hz (or per-sample rates) in inference mode."""
    V = nn.predict(params, H, noise, sigma2, bypass_quantizer=perfect, cqi_mode=cqi_mode, active=active)
    K = H.shape[1]
    r = nats_to_bits(sum_rate(H, V, np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (K,))))
    return r if per_sample else float(np.mean(r))


def validation_r1(params: nn.ParamSet, val: ValidationSet, sigma2, cqi_mode: str = "none") -> float:
    _, d = nn.front_forward(params, params.values, val.H, val.noise, sigma2, False, True,
                            active=val.active, cqi_mode=cqi_mode)
    return float(loss_r1(val.H, d["G"].value, val.active).value)


def _check_constraints(params: nn.ParamSet, tracker: dict) -> None:
    c = params.config
    P, C = params.values["P"], params.values["C"]
    tracker["pilot"] = max(tracker.get("pilot", 0.0), abs(float(np.sum(np.abs(P) ** 2)) - c.T_p * c.Ep))
    cn = np.sqrt(np.sum(np.abs(C) ** 2, axis=-2))
    tracker["codeword"] = max(tracker.get("codeword", 0.0), float(np.max(np.abs(cn - 1))))


def _track_power(V: np.ndarray, Es: float, tracker: dict) -> None:
    err = float(np.max(np.abs(power(V) - Es))) / Es
    tracker["power"] = max(tracker.get("power", 0.0), err)


def _maybe_gradcheck(schedule: TrainSchedule, rng_dbg, f, values: dict, names: list[str], where: str):
    if schedule.debug_gradcheck <= 0 or rng_dbg.random() >= schedule.debug_gradcheck:
        return None
    sub = {n: values[n] for n in names}

    def g(leaves):
        p = dict(values)
        p.update(leaves)
        return f(p)

    rep = ad.grad_check(g, sub, max_coords=6, seed=int(rng_dbg.integers(1 << 30)))
    if not rep.passed:
        raise TrainingError(f"gradient check failed at {where}:\n{rep.summary()}")
    return rep


# ---------------------------------------------------------------------------
# multi-stage BS training


@dataclass
class StageResult:
    rates: list = field(default_factory=list)  # validation bits/s/Hz after each stage (index = stage)
    converged: bool = False
    stages_run: int = 0
    constraints: dict = field(default_factory=dict)
    log: TrainLog = field(default_factory=TrainLog)
    r1_trace: list = field(default_factory=list)  # (epoch, validation R1)


def _leaves(tape: ad.Tape, values: dict, trainable) -> dict:
    p = dict(values)
    for n in trainable:
        p[n] = tape.leaf(values[n], name=n)
    return p


def _grads(p: dict, trainable) -> dict:
    return {n: p[n].grad for n in trainable if p[n].grad is not None}


def multi_stage_train(params: nn.ParamSet, source: ChannelSource, schedule: TrainSchedule, sigma2,
                      front: str = "perfect", run_initial: bool = True, cqi_mode: str = "none",
                      active_sampler: Callable | None = None, val: ValidationSet | None = None,
                      rng=None, result: StageResult | None = None,
                      frozen_fn: Callable | None = None, on_epoch: Callable | None = None,
                      train_dequantizer: bool = True) -> StageResult:
    """Stage-wise training of the BS network.

    Stage 0 trains with ``W = I`` and the W network bypassed.  Every later
    stage copies the current network, derives ``W_k = E_k^-1`` from the
    copy per batch and minimises the weighted MSE.  Stops when the
    validation sum-rate improves by less than ``conv_tol`` (relative) or
    after ``stages_max`` stages; a stage that lowers the validation rate is
    rolled back.

    ``front='perfect'`` feeds the true channel; ``'frozen'`` feeds the
    hard-feedback reconstruction of the front end.  There the pilots, user
    networks and codebook stay fixed, so the fed-back indices do not change,
    while the dequantizer networks are trained with the BS network unless
    ``train_dequantizer`` is false.  ``frozen_fn`` (H, H_in) -> W replaces
    the copied network when given.
    """
    c = params.config
    rng = make_rng(schedule.seed, STREAM_TRAIN) if rng is None else rng
    rng_dbg = make_rng(schedule.seed, STREAM_MISC + 100)
    res = result or StageResult()
    if val is None:
        val = make_validation(source, schedule.n_val, schedule.seed, c.T_p, active_sampler)
    perfect = front == "perfect"
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (c.K,))

    def validate():
        return evaluate_rate(params, val.H, val.noise, s2, perfect=perfect, cqi_mode=cqi_mode, active=val.active)

    deq_names = []
    if not perfect and train_dequantizer:
        deq_names = [nm for n in params.user_net_names("D") for nm, _ in params.nets[n].param_shapes()]

    def bs_input(H, noise, active):
        """BS input as an array plus the feedback (indices, CQI) it came from."""
        if perfect:
            return (H if active is None else H * active[:, :, None, None]), None
        Hbar, d = nn.front_forward(params, params.values, H, noise, s2, False, True,
                                   active=active, cqi_mode=cqi_mode)
        cqi = d["cqi"].value if isinstance(d["cqi"], ad.Var) else d["cqi"]
        return Hbar.value, (d["idx"], cqi)

    def dequantized(ps: nn.ParamSet, p, fb, active, training: bool):
        Hbar = nn.dequantize(ps, p, None, fb[0], True, training, fb[1], active)
        if active is not None:
            Hbar = ad.where_mask(Hbar, np.asarray(active, dtype=bool)[:, :, None, None])
        return Hbar

    def run_stage(stage: int, pre: nn.ParamSet | None):
        w_id = pre is None
        params.w_identity = w_id
        names = [n for n in params.names(nn.BS_GROUP) if not (w_id and n.startswith("W."))] + deq_names
        adam = AdamState.for_params(params.values, names)
        n_ep = schedule.epochs_init if stage == 0 else schedule.epochs_per_stage
        for ep in range(n_ep):
            lr = schedule.lr(ep, n_ep)
            tot, cnt = 0.0, 0
            for bsz in schedule.batches():
                H = source.sample(rng, bsz)
                noise = None if perfect else complex_normal(rng, (bsz, c.K, c.N_r, c.T_p))
                active = None if active_sampler is None else active_sampler(rng, bsz)
                H_in, fb = bs_input(H, noise, active)
                W_fr = None
                if pre is not None:
                    if frozen_fn is not None:
                        W_fr = frozen_fn(H, H_in)
                    else:
                        H_pre = dequantized(pre, pre.values, fb, active, False) if deq_names else H_in
                        V_pre, _ = nn.bs_forward(pre, pre.values, H_pre, c.Es, s2, False, active=active)
                        W_fr = frozen_weights(mse_matrices(H, V_pre.value, s2))

                def loss_fn(p):
                    H_bs = dequantized(params, p, fb, active, True) if deq_names else H_in
                    V, _ = nn.bs_forward(params, p, H_bs, c.Es, s2, True, active=active)
                    return loss_weighted_mse(W_fr, H, V, s2, active), V

                tape = ad.Tape()
                p = _leaves(tape, params.values, names)
                loss, V = loss_fn(p)
                lv = float(loss.value)
                if not math.isfinite(lv):
                    raise TrainingError(f"non-finite loss at stage {stage}, epoch {ep}")
                ad.backward(tape, loss)
                _maybe_gradcheck(schedule, rng_dbg, lambda q: loss_fn(q)[0], params.values, names,
                                 f"stage {stage}, epoch {ep}")
                _track_power(V.value, c.Es, res.constraints)
                try:
                    adam_step(adam, params.values, _grads(p, names), lr)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} (stage {stage}, epoch {ep})") from None
                tot += lv * bsz
                cnt += bsz
            val_rate = validate() if (ep + 1) % schedule.val_every == 0 or ep == n_ep - 1 else math.nan
            res.log.add(stage, ep, tot / cnt, val=val_rate, lr=lr)
            if on_epoch is not None:
                on_epoch(params, stage, ep)
        return validate()

    if run_initial:
        rate = run_stage(0, None)
    else:
        rate = validate()
    res.rates.append(rate)
    for stage in range(1, schedule.stages_max + 1):
        pre = params.copy()
        rate = run_stage(stage, pre)
        res.stages_run = stage
        prev = res.rates[-1]
        if rate < prev:
            # keep the better network; the stage is recorded but rolled back
            params.values, params.nets, params.w_identity = pre.values, pre.nets, pre.w_identity
            res.rates.append(prev)
        else:
            res.rates.append(rate)
        if (rate - prev) / abs(prev) < schedule.conv_tol:
            res.converged = True
            break
    return res


# ---------------------------------------------------------------------------
# end-to-end training


def end_to_end_train(params: nn.ParamSet, source: ChannelSource, schedule: TrainSchedule, sigma2,
                     cqi_mode: str = "none", active_sampler: Callable | None = None,
                     stage_training: bool = True, on_epoch: Callable | None = None) -> StageResult:
    """Joint training of pilots, user/dequantizer networks, codebook and BS
    network, followed by multi-stage training of the BS network alone.

    Each step: Adam on ``L + lambda1 * R1`` (``W = I``, soft feedback),
    projection of ``P`` and ``C``, then an Adam ascent step on the codeword
    affinity of the same batch and another projection of ``C``.  Pilot and
    codebook gradients are restricted to the tangent space of their
    constraint sets before Adam (see :func:`tangent_grads`).
    """
    c = params.config
    alpha = schedule.alpha if schedule.alpha is not None else c.alpha
    rng = make_rng(schedule.seed, STREAM_TRAIN)
    rng_dbg = make_rng(schedule.seed, STREAM_MISC + 100)
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (c.K,))
    val = make_validation(source, schedule.n_val, schedule.seed, c.T_p, active_sampler)
    res = StageResult()
    params.w_identity = True
    names = [n for n in params.names() if not n.startswith("W.")]
    adam = AdamState.for_params(params.values, names)
    adam_c = AdamState.for_params(params.values, ["C"])
    n_ep = schedule.epochs_init
    _check_constraints(params, res.constraints)
    for ep in range(n_ep):
        lr = schedule.lr(ep, n_ep)
        tot = r1_tot = r2_tot = 0.0
        cnt = 0
        for bsz in schedule.batches():
            H = source.sample(rng, bsz)
            noise = complex_normal(rng, (bsz, c.K, c.N_r, c.T_p))
            active = None if active_sampler is None else active_sampler(rng, bsz)

            def loss_fn(p):
                V, d = nn.end_to_end_forward(params, p, H, noise, s2, True, hard=False, alpha=alpha,
                                             active=active, cqi_mode=cqi_mode, w_identity=True)
                L = loss_weighted_mse(None, H, V, s2, active)
                R1 = loss_r1(H, d["G"], active)
                return L + ad.scale(R1, schedule.lambda1), L, R1, V, d

            tape = ad.Tape()
            p = _leaves(tape, params.values, names)
            loss, L, R1, V, d = loss_fn(p)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss at epoch {ep}")
            ad.backward(tape, loss)
            _maybe_gradcheck(schedule, rng_dbg, lambda q: loss_fn(q)[0], params.values, names, f"epoch {ep}")
            _track_power(V.value, c.Es, res.constraints)
            try:
                adam_step(adam, params.values, tangent_grads(params.values, _grads(p, names)), lr)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (epoch {ep})") from None
            params.values["P"] = project_pilot(params.values["P"], c.T_p, c.Ep)
            params.values["C"] = project_codebook(params.values["C"])
            # codebook ascent on the affinity of this batch, everything else fixed
            Gbar = d["G_bar"].value
            tape = ad.Tape()
            Cv = tape.leaf(params.values["C"], name="C")
            idx = np.argmax(nn.correlations(Gbar, params.values["C"]).value, axis=-1)
            R2 = loss_r2(Gbar, Cv, idx, active)
            ad.backward(tape, ad.scale(R2, schedule.lambda2))
            adam_step(adam_c, params.values, tangent_grads(params.values, {"C": Cv.grad}), lr)
            params.values["C"] = project_codebook(params.values["C"])
            tot += lv * bsz
            r1_tot += float(R1.value) * bsz
            r2_tot += float(R2.value) * bsz
            cnt += bsz
        _check_constraints(params, res.constraints)
        val_rate = math.nan
        if (ep + 1) % schedule.val_every == 0 or ep == n_ep - 1 or ep == 0:
            val_rate = evaluate_rate(params, val.H, val.noise, s2, cqi_mode=cqi_mode, active=val.active)
            res.r1_trace.append((ep, validation_r1(params, val, s2, cqi_mode)))
        res.log.add(0, ep, tot / cnt, r1_tot / cnt, r2_tot / cnt, val_rate, lr)
        if on_epoch is not None:
            on_epoch(params, 0, ep)
    res.rates.append(evaluate_rate(params, val.H, val.noise, s2, cqi_mode=cqi_mode, active=val.active))
    if stage_training:
        rng_bs = make_rng(schedule.seed + 1, STREAM_TRAIN)
        res.rates.pop()
        multi_stage_train(params, source, schedule, s2, front="frozen", run_initial=True, cqi_mode=cqi_mode,
                          active_sampler=active_sampler, val=val, rng=rng_bs, result=res, on_epoch=on_epoch)
    return res


def scalable_train(params: nn.ParamSet, source: ChannelSource, schedule: TrainSchedule, sigma2,
                   k_lo: int, k_hi: int, **kw) -> StageResult:
    """End-to-end training with a random active-user subset per sample."""
    sampler = uniform_active_sampler(params.config.K, k_lo, k_hi)
    return end_to_end_train(params, source, schedule, sigma2, active_sampler=sampler, **kw)


@dataclass
class CqiSystem:
    with_cqi: nn.ParamSet  # trained with the exact norm; carries the fitted quantizer
    without_cqi: nn.ParamSet | None
    results: dict = field(default_factory=dict)


def fit_cqi_quantizer(params: nn.ParamSet, source: ChannelSource, sigma2, bits: int, n: int = 20000,
                      seed: int = 0) -> ScalarQuantizer:
    """Lloyd scalar quantizer on the empirical distribution of ``||G_k||_F``."""
    rng = make_rng(seed, STREAM_MISC)
    c = params.config
    H = source.sample(rng, n)
    noise = complex_normal(rng, (n, c.K, c.N_r, c.T_p))
    _, d = nn.front_forward(params, params.values, H, noise, sigma2, False, True, cqi_mode="full")
    norms = np.sqrt(np.sum(np.abs(d["G"].value) ** 2, axis=(-2, -1)))
    return lloyd_scalar_train(norms.ravel(), bits)


def cqi_pipeline(config: nn.ModelConfig, source: ChannelSource, schedule: TrainSchedule, sigma2,
                 cqi_bits: int = 1, train_without: bool = True) -> CqiSystem:
    """Train with the exact CQI, fit the Lloyd CQI quantizer, and (optionally)
    train a no-CQI system that spends the CQI bits on direction instead.
    """
    cfg = replace(config, cqi=True)
    params = init_params(cfg, schedule.seed)
    res = end_to_end_train(params, source, schedule, sigma2, cqi_mode="full")
    params.cqi_quantizer = fit_cqi_quantizer(params, source, sigma2, cqi_bits, seed=schedule.seed)
    out = CqiSystem(params, None, {"full_training": res})
    if train_without:
        cfg0 = replace(config, B=config.B + cqi_bits, cqi=False)
        p0 = init_params(cfg0, schedule.seed)
        out.results["none_training"] = end_to_end_train(p0, source, schedule, sigma2, cqi_mode="none")
        out.without_cqi = p0
    return out
