"""Experiment orchestration: config files, training drivers, Monte Carlo
evaluation with common random numbers, and timing.

Config format: one ``key = value`` pair per line, ``#`` starts a comment.
Lists are comma separated.  The keys are the fields of
:class:`ExperimentConfig` with their defaults; only ``K`` is required.
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from . import classic
from . import feedback as fb
from . import neural as nn
from . import training as tr
from .channels import ChannelBatch, ChannelConfig, apply_pathloss, gen_mmwave, gen_rayleigh
from .complex_tensor import nats_to_bits
from .rng import STREAM_NOISE, complex_normal, make_rng

SCENARIOS = ("perfect-csit", "e2e", "baseline", "scalable", "cqi")
CHANNELS = ("rayleigh", "mmwave", "pathloss")
CSV_COLUMNS = ["method", "K", "N_t", "N_r", "T_p", "B", "snr_db", "sum_rate_bps_hz", "stderr", "n_samples", "seed"]
TIMING_COLUMNS = ["method", "snr_db", "mean_time_ms", "mean_iterations", "n_instances"]
LEARNED = ("proposed", "proposed-perfect")
METHODS = ("wmmse", "rzf", "zf", "baseline") + LEARNED


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ExperimentConfig:
    K: int
    scenario: str = "e2e"
    K_max: int | None = None  # scalable: network size (defaults to K)
    K_min: int = 1  # scalable: smallest trained user count
    N_t: int | None = None  # default K * N_r
    N_r: int = 1
    T_p: int | None = None  # default N_t
    B: int = 4
    Es: float = 1.0
    Ep: float = 1.0
    snr_db: tuple = (10.0,)
    channel: str = "rayleigh"
    n_paths: int = 4
    d0: float = 30.0
    delta: float = 3.0
    radius: float = 100.0
    # schedule
    epochs_init: int = 2000
    epochs_per_stage: int = 500
    stages_max: int = 10
    batch_size: int = 256
    samples_per_epoch: int = 1000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    alpha: float | None = None
    lambda1: float = 0.1
    lambda2: float = 1.0
    n_val: int = 10000
    val_every: int = 50
    conv_tol: float = 0.005
    # feedback
    cqi_bits: int = 1  # learned CQI quantizer (cqi scenario)
    cqi_mode: str = "none"  # evaluation mode for learned models: none | full | quant
    baseline_cqi_bits: int | None = 8  # None = exact norm, 0 = no CQI
    n_baseline_train: int = 20000
    # evaluation
    methods: tuple = ()
    n_test: int = 10000
    seed: int = 0
    test_seed: int = 1000
    checkpoint: str | None = None  # may contain {snr}
    data: str | None = None
    out: str = "out"
    n_timing: int = 200

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1", "K")
        if self.N_r < 1:
            raise ConfigError("N_r must be >= 1", "N_r")
        if self.N_t is None:
            self.N_t = self.K * self.N_r
        if self.T_p is None:
            self.T_p = self.N_t
        if self.K_max is None:
            self.K_max = self.K
        if self.N_t < self.N_r:
            raise ConfigError(f"N_t = {self.N_t} must be >= N_r = {self.N_r}", "N_t")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}", "scenario")
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}; choose from {', '.join(CHANNELS)}", "channel")
        if self.channel == "mmwave" and self.N_r != 1:
            raise ConfigError("the mmwave channel needs N_r = 1", "channel")
        for key, low in (("B", 1), ("T_p", 1), ("n_test", 2), ("epochs_init", 0), ("stages_max", 0)):
            if getattr(self, key) < low:
                raise ConfigError(f"{key} must be >= {low}", key)
        if not 1 <= self.K_min <= self.K_max:
            raise ConfigError(f"K_min = {self.K_min} must lie in [1, K_max = {self.K_max}]", "K_min")
        if self.cqi_mode not in ("none", "full", "quant"):
            raise ConfigError(f"unknown cqi_mode {self.cqi_mode!r}", "cqi_mode")
        if not self.snr_db:
            raise ConfigError("snr_db needs at least one value", "snr_db")
        self.snr_db = tuple(float(s) for s in self.snr_db)
        if not self.methods:
            self.methods = default_methods(self.scenario)

    def sigma2(self, snr_db: float) -> float:
        """Noise power for SNR = Es / sigma^2."""
        return self.Es / 10 ** (snr_db / 10)

    def model_config(self) -> nn.ModelConfig:
        K = self.K_max if self.scenario == "scalable" else self.K
        cfg = nn.ModelConfig(K=K, N_t=self.N_t, N_r=self.N_r, T_p=self.T_p, B=self.B, Es=self.Es, Ep=self.Ep,
                             cqi=self.scenario == "cqi")
        return cfg.mmwave_sizes() if self.channel == "mmwave" else cfg

    def schedule(self) -> tr.TrainSchedule:
        return tr.TrainSchedule(epochs_init=self.epochs_init, epochs_per_stage=self.epochs_per_stage,
                                stages_max=self.stages_max, batch_size=self.batch_size,
                                samples_per_epoch=self.samples_per_epoch, lr_start=self.lr_start,
                                lr_end=self.lr_end, alpha=self.alpha, lambda1=self.lambda1, lambda2=self.lambda2,
                                seed=self.seed, n_val=self.n_val, val_every=self.val_every,
                                conv_tol=self.conv_tol)

    def source(self, K: int | None = None) -> tr.ChannelSource:
        return tr.ChannelSource(K or self.K, self.N_t, self.N_r, kind=self.channel, n_paths=self.n_paths,
                                d0=self.d0, delta=self.delta, radius=self.radius)

    def checkpoint_path(self, snr_db: float) -> str:
        if self.checkpoint:
            return self.checkpoint.format(snr=_snr_tag(snr_db))
        return os.path.join(self.out, f"model_snr{_snr_tag(snr_db)}.ckpt")


def default_methods(scenario: str) -> tuple:
    return {
        "perfect-csit": ("proposed-perfect", "wmmse", "rzf", "zf"),
        "e2e": ("proposed", "baseline", "wmmse"),
        "baseline": ("baseline", "wmmse", "rzf"),
        "scalable": ("proposed", "wmmse"),
        "cqi": ("proposed", "baseline", "wmmse"),
    }[scenario]


def _snr_tag(snr_db: float) -> str:
    return f"{snr_db:g}"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TUPLE_FLOAT = {"snr_db"}
_TUPLE_STR = {"methods"}


def _convert(key: str, raw: str):
    t = _FIELD_TYPES[key]
    try:
        if key in _TUPLE_FLOAT:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if key in _TUPLE_STR:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if raw.lower() == "none" and "None" in t:
            return None
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}", key) from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = (_convert(key, raw), lineno)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}", key) from None
    if "K" not in values:
        raise ConfigError(f"{source}: missing required key 'K'")
    try:
        cfg = ExperimentConfig(**{k: v for k, (v, _) in values.items()})
    except ConfigError as exc:
        where = f"{source}:{values[exc.key][1]}" if exc.key in values else source
        raise ConfigError(f"{where}: {exc}", exc.key) from None
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError(f"{source}:{values['methods'][1]}: unknown method {m!r}", "methods")
    return cfg


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# data


@dataclass
class TestSet:
    """Channels and pilot noise shared by every method (common random numbers)."""
    H: np.ndarray
    noise: np.ndarray
    pathloss: np.ndarray | None = None
    active: np.ndarray | None = None


def make_test_set(cfg: ExperimentConfig, n: int | None = None, K: int | None = None,
                  seed: int | None = None) -> TestSet:
    n = cfg.n_test if n is None else n
    K = K or (cfg.K_max if cfg.scenario == "scalable" else cfg.K)
    seed = cfg.test_seed if seed is None else seed
    chan = ChannelConfig(K, cfg.N_t, cfg.N_r)
    if cfg.channel == "mmwave":
        batch = gen_mmwave(chan, cfg.n_paths, n, seed)
    else:
        batch = gen_rayleigh(chan, n, seed)
        if cfg.channel == "pathloss":
            batch = apply_pathloss(batch, cfg.d0, cfg.delta, cfg.radius, seed)
    noise = complex_normal(make_rng(seed, STREAM_NOISE), (n, K, cfg.N_r, cfg.T_p))
    return TestSet(batch.H, noise, batch.pathloss)


def test_set_from_batch(cfg: ExperimentConfig, batch: ChannelBatch, seed: int | None = None) -> TestSet:
    seed = cfg.test_seed if seed is None else seed
    n, K = batch.H.shape[:2]
    noise = complex_normal(make_rng(seed, STREAM_NOISE), (n, K, batch.H.shape[2], cfg.T_p))
    return TestSet(batch.H, noise, batch.pathloss)


def gen_data(cfg: ExperimentConfig, n: int, seed: int) -> ChannelBatch:
    ts = make_test_set(cfg, n=n, seed=seed)
    return ChannelBatch(ts.H, cfg.sigma2(cfg.snr_db[0]), ts.pathloss)


# ---------------------------------------------------------------------------
# training


def train(cfg: ExperimentConfig, snr_db: float, log_path: str | None = None,
          deterministic: bool = False) -> tuple[nn.ParamSet, tr.StageResult]:
    """Train the learned system for one SNR according to ``cfg.scenario``."""
    s2 = cfg.sigma2(snr_db)
    sch = cfg.schedule()
    mcfg = cfg.model_config()
    if cfg.scenario == "perfect-csit":
        params = tr.init_params(mcfg, cfg.seed)
        res = tr.multi_stage_train(params, cfg.source(), sch, s2, front="perfect")
    elif cfg.scenario == "e2e":
        params = tr.init_params(mcfg, cfg.seed)
        res = tr.end_to_end_train(params, cfg.source(), sch, s2)
    elif cfg.scenario == "scalable":
        params = tr.init_params(mcfg, cfg.seed)
        res = tr.scalable_train(params, cfg.source(cfg.K_max), sch, s2, cfg.K_min, cfg.K_max)
    elif cfg.scenario == "cqi":
        system = tr.cqi_pipeline(mcfg, cfg.source(), sch, s2, cqi_bits=cfg.cqi_bits, train_without=False)
        params, res = system.with_cqi, system.results["full_training"]
    else:
        raise ConfigError(f"scenario {cfg.scenario!r} has nothing to train")
    if log_path:
        res.log.write_csv(log_path, include_wall=not deterministic)
    return params, res


# ---------------------------------------------------------------------------
# evaluation


def _stats(bits: np.ndarray) -> tuple[float, float]:
    return float(np.mean(bits)), float(np.std(bits, ddof=1) / math.sqrt(len(bits)))


def fit_baseline_system(cfg: ExperimentConfig, snr_db: float, cqi_bits="config") -> fb.BaselineSystem:
    """Lloyd codebook and CQI quantizer fitted on a training draw disjoint from the test set."""
    bits = cfg.baseline_cqi_bits if cqi_bits == "config" else cqi_bits
    ts = make_test_set(cfg, n=cfg.n_baseline_train, seed=cfg.seed + 7919)
    prior = 1.0 if ts.pathloss is None else ts.pathloss[..., None, None]
    return fb.fit_baseline(ts.H, cfg.sigma2(snr_db), cfg.Es, cfg.Ep, cfg.T_p, cfg.B, cfg.seed, cqi_bits=bits,
                           prior_var=prior)


def method_precoders(method: str, cfg: ExperimentConfig, ts: TestSet, snr_db: float,
                     params: nn.ParamSet | None = None, baseline: fb.BaselineSystem | None = None) -> np.ndarray:
    s2 = cfg.sigma2(snr_db)
    H = ts.H
    if method == "wmmse":
        return classic.wmmse_solve(H, cfg.Es, s2).V
    if method == "rzf":
        return classic.rzf(H, cfg.Es, s2)
    if method == "zf":
        return classic.zf(H, cfg.Es)
    if method == "baseline":
        system = baseline or fit_baseline_system(cfg, snr_db)
        prior = 1.0 if ts.pathloss is None else ts.pathloss[..., None, None]
        return fb.baseline_pipeline(H, system, s2, prior_var=prior, noise=ts.noise)
    if method in LEARNED:
        if params is None:
            raise FileNotFoundError(f"method {method!r} needs a trained checkpoint")
        mode = cfg.cqi_mode if params.config.cqi else "none"
        return nn.predict(params, H, ts.noise, s2, bypass_quantizer=method == "proposed-perfect",
                          cqi_mode=mode, active=ts.active)
    raise ConfigError(f"unknown method {method!r}")


def load_checkpoint(cfg: ExperimentConfig, snr_db: float) -> nn.ParamSet:
    path = cfg.checkpoint_path(snr_db)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path}; run 'train' first")
    return nn.load_params(path)


def run_eval(cfg: ExperimentConfig, methods=None, test_set: TestSet | None = None,
             params_by_snr: dict | None = None, per_sample: bool = False):
    """Average sum-rate of each method at each SNR on one shared test set.

    Returns CSV rows (dicts with ``CSV_COLUMNS``); with ``per_sample`` also a
    dict ``(method, snr) -> per-sample bits`` for paired comparisons.
    """
    methods = tuple(methods or cfg.methods)
    ts = test_set or make_test_set(cfg)
    K = ts.H.shape[1]
    rows, samples = [], {}
    for snr in cfg.snr_db:
        s2 = cfg.sigma2(snr)
        params = None
        if any(m in LEARNED for m in methods):
            params = (params_by_snr or {}).get(snr) or load_checkpoint(cfg, snr)
        for m in methods:
            V = method_precoders(m, cfg, ts, snr, params)
            bits = nats_to_bits(classic.sum_rate(ts.H, V, s2))
            mean, se = _stats(bits)
            rows.append(dict(method=m, K=K, N_t=cfg.N_t, N_r=cfg.N_r, T_p=cfg.T_p, B=cfg.B, snr_db=snr,
                             sum_rate_bps_hz=mean, stderr=se, n_samples=len(bits), seed=cfg.test_seed))
            samples[(m, snr)] = bits
    return (rows, samples) if per_sample else rows


def write_csv(rows, path, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# timing


def run_timing(cfg: ExperimentConfig, params: nn.ParamSet | None = None) -> list[dict]:
    """Per-instance wall time of a plain FC forward, the proposed forward and
    WMMSE at each SNR.  Instances are processed one at a time, after an
    untimed warmup, with the SNRs interleaved per instance."""
    mcfg = cfg.model_config()
    params = params or tr.init_params(mcfg, cfg.seed)
    ts = make_test_set(cfg, n=cfg.n_timing)
    n_in = 2 * cfg.N_t * cfg.K * cfg.N_r
    fc = nn.FcNetwork("T", (n_in, 200, 200, 200, n_in))
    fc_vals = {name: np.full(shape, 0.01) if ".W" in name else np.ones(shape) if "gamma" in name
               else np.zeros(shape) for name, shape in fc.param_shapes()}
    snrs = list(cfg.snr_db)
    t = np.zeros((len(snrs), 3))
    iters = np.zeros(len(snrs))
    # untimed warmup, then SNRs interleaved per instance so drift hits all equally
    for i in range(-10, cfg.n_timing):
        k = i % cfg.n_timing
        H, N = ts.H[k:k + 1], ts.noise[k:k + 1]
        x = np.concatenate([H.real.ravel(), H.imag.ravel()])[None]
        for j, snr in enumerate(snrs):
            s2 = cfg.sigma2(snr)
            t0 = time.perf_counter()
            nn.fc_forward(fc, x, fc_vals, False)
            t1 = time.perf_counter()
            nn.predict(params, H, N, s2)
            t2 = time.perf_counter()
            state = classic.wmmse_solve(H, cfg.Es, s2)
            t3 = time.perf_counter()
            if i >= 0:
                t[j] += (t1 - t0, t2 - t1, t3 - t2)
                iters[j] += int(np.asarray(state.iteration).ravel()[0])
    n = cfg.n_timing
    rows = []
    for j, snr in enumerate(snrs):
        for m, method in enumerate(("fc-forward", "proposed-forward", "wmmse")):
            rows.append(dict(method=method, snr_db=snr, mean_time_ms=1e3 * t[j, m] / n,
                             mean_iterations=iters[j] / n if method == "wmmse" else "", n_instances=n))
    return rows
