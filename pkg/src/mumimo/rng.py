"""Seeded random streams.

All randomness goes through numpy's Philox4x64 counter-based generator
keyed by ``(seed, stream)``.  Gaussians come from the Box-Muller transform
applied to consecutive uniform pairs, so a complex sample consumes exactly
two uniforms (real part from the cosine branch, imaginary part from the
sine branch) and the draw order is fixed by the array layout.
"""
from __future__ import annotations

import numpy as np

# stream ids; keep stable, they are part of the reproducibility contract
STREAM_CHANNEL = 1
STREAM_PATHLOSS = 2
STREAM_NOISE = 3
STREAM_INIT = 4
STREAM_TRAIN = 5
STREAM_LLOYD = 6
STREAM_MASK = 7
STREAM_MISC = 8
STREAM_VALID = 9


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniforms on (0, 1]; safe for ``log``."""
    return 1.0 - rng.random(shape)


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """CN(0, var) samples via Box-Muller; re and im each have variance var/2."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    u = uniform_open(rng, shape + (2,))
    r = np.sqrt(-2.0 * np.log(u[..., 0]))
    th = 2.0 * np.pi * u[..., 1]
    s = np.sqrt(var / 2.0)
    return s * r * np.cos(th) + 1j * (s * r * np.sin(th))


def real_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """N(0, 1) samples via Box-Muller (one pair per output, cosine branch)."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    u = uniform_open(rng, shape + (2,))
    return np.sqrt(-2.0 * np.log(u[..., 0])) * np.cos(2.0 * np.pi * u[..., 1])
