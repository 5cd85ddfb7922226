"""Random downlink channels and dataset persistence.

Channels are stored as ``(n, K, N_r, N_t)`` complex arrays; the stacked
``K*N_r x N_t`` matrix of one sample is ``H[i].reshape(K * N_r, N_t)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import STREAM_CHANNEL, STREAM_PATHLOSS, complex_normal, make_rng

MAGIC = b"MUMIMO1\0"
VERSION = 1


class FormatError(ValueError):
    """Dataset/codebook/checkpoint file is malformed or of the wrong version."""


@dataclass(frozen=True)
class ChannelConfig:
    K: int
    N_t: int
    N_r: int = 1


@dataclass
class ChannelBatch:
    H: np.ndarray  # (n, K, N_r, N_t) complex128
    sigma2: np.ndarray  # (K,)
    pathloss: np.ndarray | None = None  # (n, K) or None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.complex128)
        if self.H.ndim != 4:
            raise ValueError(f"H must be (n, K, N_r, N_t), got {self.H.shape}")
        self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=np.float64), (self.K,)).copy()
        if np.any(self.sigma2 <= 0):
            raise ValueError("noise variances must be positive")
        if self.pathloss is not None:
            self.pathloss = np.asarray(self.pathloss, dtype=np.float64)
            if self.pathloss.shape != (self.n, self.K):
                raise ValueError(f"pathloss must be (n, K), got {self.pathloss.shape}")
            if np.any(self.pathloss <= 0) or np.any(self.pathloss > 1):
                raise ValueError("pathloss gains must lie in (0, 1]")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    @property
    def N_r(self) -> int:
        return self.H.shape[2]

    @property
    def N_t(self) -> int:
        return self.H.shape[3]

    def stacked(self) -> np.ndarray:
        return self.H.reshape(self.n, self.K * self.N_r, self.N_t)

    def subset(self, idx) -> "ChannelBatch":
        pl = None if self.pathloss is None else self.pathloss[idx]
        return replace(self, H=self.H[idx], pathloss=pl)

    def with_sigma2(self, sigma2) -> "ChannelBatch":
        return replace(self, sigma2=np.broadcast_to(sigma2, (self.K,)).copy())


def gen_rayleigh(cfg: ChannelConfig, n: int, seed: int, sigma2=1.0, rng=None) -> ChannelBatch:
    """i.i.d. CN(0, 1) entries.

    Draw order: sample, user, row, column; each entry takes one Box-Muller
    pair.  Passing ``rng`` continues an existing stream instead of keying a
    new one from ``seed``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, STREAM_CHANNEL) if rng is None else rng
    H = complex_normal(rng, (n, cfg.K, cfg.N_r, cfg.N_t))
    return ChannelBatch(H, sigma2, meta={"channel": "rayleigh"})


def steering(n_t: int, theta) -> np.ndarray:
    """Half-wavelength ULA response ``exp(j*pi*m*sin(theta))``, m = 0..N_t-1."""
    m = np.arange(n_t)
    theta = np.asarray(theta, dtype=np.float64)
    return np.exp(1j * np.pi * np.sin(theta)[..., None] * m)


def gen_mmwave(cfg: ChannelConfig, n_paths: int, n: int, seed: int, sigma2=1.0,
               max_angle_deg: float = 30.0, rng=None) -> ChannelBatch:
    """Narrowband geometric channel, one row per user (N_r = 1).

    ``h_k = sqrt(N_t / I_p) * sum_l alpha_l a(theta_l)^H / sqrt(N_t)`` with
    ``alpha_l ~ CN(0, 1)`` and ``theta_l ~ U[-30 deg, 30 deg]``, so that
    ``E||h_k||^2 = N_t`` as for the Rayleigh model.  Per user the path gains
    are drawn first, then the angles.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    if cfg.N_r != 1:
        raise ValueError("mmWave model is defined for N_r = 1")
    rng = make_rng(seed, STREAM_CHANNEL) if rng is None else rng
    H = np.empty((n, cfg.K, 1, cfg.N_t), dtype=np.complex128)
    lim = np.deg2rad(max_angle_deg)
    # one block per (sample, user): 2*I_p Box-Muller uniforms, then I_p angle uniforms
    u = rng.random((n, cfg.K, 3 * n_paths))
    bm = (1.0 - u[..., : 2 * n_paths]).reshape(n, cfg.K, n_paths, 2)
    r = np.sqrt(-np.log(bm[..., 0]))  # sqrt(-2 log u) * sqrt(1/2)
    alpha = r * np.cos(2 * np.pi * bm[..., 1]) + 1j * r * np.sin(2 * np.pi * bm[..., 1])
    theta = -lim + 2 * lim * u[..., 2 * n_paths:]
    a = steering(cfg.N_t, theta)  # (n, K, I_p, N_t)
    H[:, :, 0, :] = np.sqrt(1.0 / n_paths) * np.einsum("nkl,nklm->nkm", alpha, np.conj(a))
    batch = ChannelBatch(H, sigma2, meta={"channel": "mmwave", "n_paths": n_paths})
    batch.meta["angles"] = theta
    batch.meta["gains"] = alpha
    return batch


def pathloss_gain(d, d0: float, delta: float):
    return 1.0 / (1.0 + (np.asarray(d, dtype=np.float64) / d0) ** delta)


def apply_pathloss(batch: ChannelBatch, d0: float, delta: float, radius: float, seed: int,
                   rng=None) -> ChannelBatch:
    """Drop users uniformly over a disc around the BS and scale by sqrt(rho)."""
    if d0 <= 0 or delta <= 0:
        raise ValueError("d0 and delta must be positive")
    rng = make_rng(seed, STREAM_PATHLOSS) if rng is None else rng
    d = radius * np.sqrt(rng.random((batch.n, batch.K)))
    rho = pathloss_gain(d, d0, delta)
    H = batch.H * np.sqrt(rho)[:, :, None, None]
    meta = dict(batch.meta, d0=d0, delta=delta, radius=radius, distance=d)
    return ChannelBatch(H, batch.sigma2, pathloss=rho, meta=meta)


# ---------------------------------------------------------------------------
# binary dataset format


def save_batch(batch: ChannelBatch, path) -> None:
    n, K, N_r, N_t = batch.H.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, K, N_t, N_r, n))
        fh.write(np.asarray(batch.sigma2, dtype="<f8").tobytes())
        has_pl = batch.pathloss is not None
        fh.write(struct.pack("<B", int(has_pl)))
        per = np.empty((n, 2 * K * N_r * N_t), dtype="<f8")
        flat = batch.H.reshape(n, -1)
        per[:, 0::2] = flat.real
        per[:, 1::2] = flat.imag
        if has_pl:
            per = np.concatenate([batch.pathloss.astype("<f8"), per], axis=1)
        fh.write(per.tobytes())


def _read_exact(fh, nbytes: int, what: str) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated file while reading {what} ({len(buf)} of {nbytes} bytes)")
    return buf


def load_batch(path) -> ChannelBatch:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, K, N_t, N_r, n = struct.unpack("<5I", _read_exact(fh, 20, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version: expected {VERSION}, found {version}")
        sigma2 = np.frombuffer(_read_exact(fh, 8 * K, "noise variances"), dtype="<f8").astype(np.float64)
        (has_pl,) = struct.unpack("<B", _read_exact(fh, 1, "pathloss flag"))
        width = 2 * K * N_r * N_t + (K if has_pl else 0)
        raw = _read_exact(fh, 8 * width * n, "samples")
        if fh.read(1):
            raise FormatError("trailing bytes after last sample")
    per = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, width)
    pl = None
    if has_pl:
        pl, per = per[:, :K].copy(), per[:, K:]
    H = (per[:, 0::2] + 1j * per[:, 1::2]).reshape(n, K, N_r, N_t)
    return ChannelBatch(H, sigma2, pathloss=pl)


def write_matrix_entries(fh, mats: np.ndarray) -> None:
    """Append complex matrices in the dataset entry layout (interleaved, row-major)."""
    flat = np.asarray(mats, dtype=np.complex128).reshape(-1)
    out = np.empty(2 * flat.size, dtype="<f8")
    out[0::2] = flat.real
    out[1::2] = flat.imag
    fh.write(out.tobytes())


def read_matrix_entries(fh, shape: tuple, what: str = "entries") -> np.ndarray:
    count = int(np.prod(shape))
    raw = _read_exact(fh, 16 * count, what)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return (arr[0::2] + 1j * arr[1::2]).reshape(shape)
