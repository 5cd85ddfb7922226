"""Conventional limited-feedback chain: orthogonal pilots, LMMSE channel
estimation, Lloyd-trained matrix codebooks with chordal-distance selection
and a scalar Lloyd quantizer for the channel-norm CQI.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .channels import FormatError, _read_exact, read_matrix_entries, write_matrix_entries
from .classic import wmmse_solve
from .complex_tensor import herm, inv
from .rng import STREAM_LLOYD, STREAM_NOISE, complex_normal, make_rng

CODEBOOK_MAGIC = b"MUMIMOCB"
CODEBOOK_VERSION = 1


class UnsupportedConfigError(ValueError):
    pass


@dataclass
class ScalarQuantizer:
    levels: np.ndarray

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("quantizer levels must be strictly increasing")

    @property
    def boundaries(self) -> np.ndarray:
        return 0.5 * (self.levels[1:] + self.levels[:-1])

    def index(self, x) -> np.ndarray:
        # a value exactly on a boundary maps to the lower level
        return np.searchsorted(self.boundaries, np.asarray(x, dtype=np.float64), side="left")

    def __call__(self, x):
        return self.levels[self.index(x)]


def quantize(q: ScalarQuantizer, x):
    return q(x)


def lloyd_scalar_train(values, bits: int, iters: int = 200, tol: float = 1e-12) -> ScalarQuantizer:
    """Scalar Lloyd-Max quantizer fitted to the empirical distribution of ``values``.

    Starts from the empirical quantiles at the cell midpoints.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    L = 2 ** bits
    levels = np.quantile(v, (np.arange(L) + 0.5) / L)
    levels = _dedupe(levels)
    for _ in range(iters):
        b = 0.5 * (levels[1:] + levels[:-1])
        cell = np.searchsorted(b, v, side="left")
        sums = np.bincount(cell, weights=v, minlength=len(levels))
        cnt = np.bincount(cell, minlength=len(levels))
        new = np.where(cnt > 0, sums / np.maximum(cnt, 1), levels)
        new = _dedupe(np.sort(new))
        if new.shape == levels.shape and np.max(np.abs(new - levels)) < tol:
            levels = new
            break
        levels = new
    return ScalarQuantizer(levels)


def _dedupe(levels: np.ndarray) -> np.ndarray:
    out = [levels[0]]
    for x in levels[1:]:
        if x > out[-1]:
            out.append(x)
    return np.array(out)


# ---------------------------------------------------------------------------
# pilots and estimation


def orthogonal_pilots(n_t: int, t_p: int, e_p: float) -> np.ndarray:
    """``N_t x T_p`` pilot with orthogonal rows, ``P P^H = (T_p E_p / N_t) I``.

    Rows are the first ``N_t`` rows of the ``T_p``-point DFT matrix.
    """
    if t_p < n_t:
        raise UnsupportedConfigError(f"orthogonal pilots need T_p >= N_t ({t_p} < {n_t})")
    m = np.arange(n_t)[:, None]
    t = np.arange(t_p)[None, :]
    F = np.exp(-2j * np.pi * m * t / t_p)
    return np.sqrt(e_p / n_t) * F


def receive_pilots(H: np.ndarray, P: np.ndarray, sigma2, rng=None, noise=None) -> np.ndarray:
    """``Y_k = H_k P + N_k`` with CN(0, sigma_k^2) noise; H is (..., K, N_r, N_t).

    ``noise`` (unit-variance, shape ``(..., K, N_r, T_p)``) may be supplied so
    that several systems see the same realisation; otherwise it is drawn
    from ``rng``.
    """
    K = H.shape[-3]
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (K,))
    N = complex_normal(rng, H.shape[:-1] + (P.shape[1],)) if noise is None else noise
    return H @ P + np.sqrt(s2)[:, None, None] * N


def lmmse_estimate(Y: np.ndarray, P: np.ndarray, sigma2, prior_var=1.0) -> np.ndarray:
    """``H_hat = Y P^H (P P^H + (sigma^2 / rho) I)^-1`` for i.i.d. CN(0, rho) entries.

    ``sigma2`` and ``prior_var`` broadcast against the leading axes of ``Y``
    (for example ``(..., K)``).
    """
    n_t = P.shape[0]
    reg = np.asarray(sigma2, dtype=np.float64) / np.asarray(prior_var, dtype=np.float64)
    G = P @ herm(P) + np.asarray(reg)[..., None, None] * np.eye(n_t)
    return Y @ herm(P) @ inv(G)


# ---------------------------------------------------------------------------
# matrix codebooks


@dataclass
class MatrixCodebook:
    entries: np.ndarray  # (2^B, N_r, N_t), unit Frobenius norm

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        nrm = np.sqrt(np.sum(np.abs(self.entries) ** 2, axis=(-2, -1)))
        if np.any(np.abs(nrm - 1) > 1e-12):
            raise ValueError("codebook entries must have unit Frobenius norm")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def bits(self) -> int:
        return int(round(np.log2(self.size)))


def row_orthonormal(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the row space of each ``N_r x N_t`` matrix (via QR)."""
    q, _ = np.linalg.qr(np.swapaxes(A, -1, -2))
    return np.swapaxes(q, -1, -2)


def _row_basis(A: np.ndarray) -> np.ndarray:
    if A.shape[-2] == 1:
        nrm = np.sqrt(np.sum(np.abs(A) ** 2, axis=(-2, -1), keepdims=True))
        return A / np.maximum(nrm, 1e-300)
    return row_orthonormal(A)


def _affinity(Ab: np.ndarray, Bb: np.ndarray) -> np.ndarray:
    """``||A B^H||_F^2`` between every sample row basis and every codeword basis."""
    X = np.einsum("...ij,cmj->...cim", Ab, np.conj(Bb))
    return np.sum(np.abs(X) ** 2, axis=(-2, -1))


def chordal_distance(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``sqrt(max(0, N_r - ||A_bar B_bar^H||_F^2))`` on row-orthonormalised arguments."""
    Ab, Bb = _row_basis(A), _row_basis(B)
    X = Ab @ herm(Bb)
    return np.sqrt(np.maximum(0.0, A.shape[-2] - np.sum(np.abs(X) ** 2, axis=(-2, -1))))


def chordal_select(H_hat: np.ndarray, codebook: MatrixCodebook) -> np.ndarray:
    """Index of the codeword nearest in chordal distance (lowest index on ties)."""
    if codebook.size == 0:
        raise ValueError("empty codebook")
    aff = _affinity(_row_basis(H_hat), _row_basis(codebook.entries))
    return np.argmax(aff, axis=-1)


def _centroid(Ab: np.ndarray, n_r: int) -> np.ndarray:
    R = np.einsum("sij,sik->jk", np.conj(Ab), Ab)  # sum A^H A, (N_t, N_t)
    w, U = np.linalg.eigh(R)
    top = U[:, ::-1][:, :n_r]  # dominant eigenvectors as columns
    return np.conj(top.T) / np.sqrt(n_r)


def lloyd_codebook_train(samples: np.ndarray, B: int, seed: int, iters: int = 50,
                         tol: float = 0.0) -> tuple[MatrixCodebook, list[float]]:
    """Lloyd iterations under chordal distance.

    Assignment: nearest codeword.  Update: the dominant ``N_r``-dimensional
    eigenspace of ``sum A_bar^H A_bar`` over the cell.  An empty cell is
    re-seeded with the sample currently farthest from its codeword.
    Returns the codebook and the mean squared chordal distortion trace
    (one value per assignment step).
    """
    samples = np.asarray(samples, dtype=np.complex128)
    n, n_r, n_t = samples.shape
    L = 2 ** B
    if n < L:
        raise ValueError(f"need at least 2^B = {L} samples, got {n}")
    rng = make_rng(seed, STREAM_LLOYD)
    Ab = _row_basis(samples)
    pick = rng.permutation(n)[:L]
    code = Ab[pick] / np.sqrt(n_r)
    trace = []
    for _ in range(iters):
        aff = _affinity(Ab, code * np.sqrt(n_r))
        assign = np.argmax(aff, axis=1)
        best = aff[np.arange(n), assign]
        dist = np.maximum(0.0, n_r - best)
        trace.append(float(dist.mean()))
        if len(trace) > 1 and trace[-2] - trace[-1] <= tol:
            break
        new = np.empty_like(code)
        for c in range(L):
            members = Ab[assign == c]
            if members.shape[0] == 0:
                far = int(np.argmax(dist))
                new[c] = Ab[far] / np.sqrt(n_r)
                dist[far] = 0.0
            else:
                new[c] = _centroid(members, n_r)
        code = new
    return MatrixCodebook(code), trace


# ---------------------------------------------------------------------------
# codebook file format


def save_codebook(cb: MatrixCodebook, path) -> None:
    L, n_r, n_t = cb.entries.shape
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<4I", CODEBOOK_VERSION, n_t, n_r, cb.bits))
        write_matrix_entries(fh, cb.entries)


def load_codebook(path) -> MatrixCodebook:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CODEBOOK_MAGIC), "magic")
        if magic != CODEBOOK_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        version, n_t, n_r, B = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        if version != CODEBOOK_VERSION:
            raise FormatError(f"unsupported codebook version: expected {CODEBOOK_VERSION}, found {version}")
        entries = read_matrix_entries(fh, (2 ** B, n_r, n_t), "codewords")
        if fh.read(1):
            raise FormatError("trailing bytes after last codeword")
    return MatrixCodebook(entries)


# ---------------------------------------------------------------------------
# end-to-end baseline


@dataclass
class BaselineSystem:
    """Everything the conventional BS/users agree on offline."""
    P: np.ndarray
    codebook: MatrixCodebook
    cqi: ScalarQuantizer | None  # None -> exact norm is fed back
    Es: float


def fit_baseline(H_train: np.ndarray, sigma2, Es: float, Ep: float, t_p: int, B: int, seed: int,
                 cqi_bits: int | None = 8, lloyd_iters: int = 50, prior_var=1.0,
                 pilot_sigma2=None) -> BaselineSystem:
    """Train the Lloyd codebook and CQI quantizer on LMMSE estimates of ``H_train``.

    ``cqi_bits=None`` lets the BS use the exact estimated norm; ``0`` fits a
    single level (the mean norm), i.e. no CQI is fed back at all.
    """
    n, K, n_r, n_t = H_train.shape
    P = orthogonal_pilots(n_t, t_p, Ep)
    ps2 = sigma2 if pilot_sigma2 is None else pilot_sigma2
    rng = make_rng(seed, STREAM_NOISE)
    s2 = np.broadcast_to(np.asarray(ps2, dtype=np.float64), (K,))
    Y = receive_pilots(H_train, P, s2, rng)
    H_hat = lmmse_estimate(Y, P, s2, prior_var)
    flat = H_hat.reshape(n * K, n_r, n_t)
    cb, _ = lloyd_codebook_train(flat, B, seed, iters=lloyd_iters)
    norms = np.sqrt(np.sum(np.abs(flat) ** 2, axis=(-2, -1)))
    q = lloyd_scalar_train(norms, cqi_bits) if cqi_bits is not None else None
    return BaselineSystem(P=P, codebook=cb, cqi=q, Es=Es)


def feedback_reconstruct(H: np.ndarray, system: BaselineSystem, sigma2, rng=None,
                         pilot_sigma2=None, prior_var=1.0, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """Users estimate, quantize and report; returns (indices, BS-side channel).

    ``prior_var`` is each user's large-scale gain (``(n, K)`` or scalar),
    known to the user for its LMMSE prior.
    """
    K = H.shape[-3]
    ps2 = np.broadcast_to(np.asarray(sigma2 if pilot_sigma2 is None else pilot_sigma2, dtype=np.float64), (K,))
    Y = receive_pilots(H, system.P, ps2, rng, noise)
    H_hat = lmmse_estimate(Y, system.P, ps2, prior_var)
    idx = chordal_select(H_hat, system.codebook)
    norms = np.sqrt(np.sum(np.abs(H_hat) ** 2, axis=(-2, -1)))
    mag = norms if system.cqi is None else system.cqi(norms)
    H_bs = system.codebook.entries[idx] * mag[..., None, None]
    return idx, H_bs


def baseline_pipeline(H: np.ndarray, system: BaselineSystem, sigma2, rng=None, pilot_sigma2=None,
                      prior_var=1.0, tol: float = 1e-6, max_iter: int = 500, noise=None) -> np.ndarray:
    """Pilots -> LMMSE -> chordal codeword + CQI -> WMMSE on the reconstruction.

    ``H`` is ``(n, K, N_r, N_t)``; returns the precoders ``(n, N_t, K*N_r)``.
    """
    _, H_bs = feedback_reconstruct(H, system, sigma2, rng, pilot_sigma2, prior_var, noise)
    return wmmse_solve(H_bs, system.Es, sigma2, tol=tol, max_iter=max_iter).V
