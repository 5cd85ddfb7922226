"""Dense complex matrix arithmetic.

``ComplexMatrix`` is the public carrier: a pair of real float64 arrays.
The batched helpers at the bottom of the module (``inv``, ``logdet_hpd``,
``herm``) work on stacked ``complex128`` ndarrays of shape ``(..., m, n)``
and are what the solvers and the autodiff engine use internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ComplexMatrix", "DimensionError", "SingularMatrixError", "DefinitenessError",
    "cmul", "chermitian", "cinv", "ctrace_real", "fro_norm", "logdet_hpd",
    "nats_to_bits", "inv", "herm", "logdet_hpd_batch", "SINGULAR_RTOL",
]

# pivot magnitude below SINGULAR_RTOL * max|A| counts as singular
SINGULAR_RTOL = 1e-13


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(ArithmeticError):
    """Matrix is singular to working precision."""

    def __init__(self, pivot: float, scale: float):
        self.pivot = float(pivot)
        self.scale = float(scale)
        super().__init__(
            f"matrix is singular to working precision (pivot {self.pivot:.3e}, max|A| {self.scale:.3e})"
        )


class DefinitenessError(ArithmeticError):
    """Matrix is not Hermitian positive definite."""


@dataclass(frozen=True)
class ComplexMatrix:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.array(self.re, dtype=np.float64)
        im = np.array(self.im, dtype=np.float64)
        if re.ndim != 2 or re.shape != im.shape:
            raise DimensionError(f"re/im must be 2-D with equal shape, got {re.shape} and {im.shape}")
        re.flags.writeable = False
        im.flags.writeable = False
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @property
    def rows(self) -> int:
        return self.re.shape[0]

    @property
    def cols(self) -> int:
        return self.re.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    @classmethod
    def from_complex(cls, a) -> "ComplexMatrix":
        a = np.asarray(a, dtype=np.complex128)
        if a.ndim == 1:
            a = a[None, :]
        return cls(a.real, a.imag)

    @classmethod
    def eye(cls, n: int) -> "ComplexMatrix":
        return cls(np.eye(n), np.zeros((n, n)))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def __matmul__(self, other: "ComplexMatrix") -> "ComplexMatrix":
        return cmul(self, other)

    def __eq__(self, other):
        if not isinstance(other, ComplexMatrix):
            return NotImplemented
        return np.array_equal(self.re, other.re) and np.array_equal(self.im, other.im)

    __hash__ = None


def cmul(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    if a.cols != b.rows:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return ComplexMatrix(a.re @ b.re - a.im @ b.im, a.re @ b.im + a.im @ b.re)


def chermitian(a: ComplexMatrix) -> ComplexMatrix:
    return ComplexMatrix(a.re.T, -a.im.T)


def cinv(a: ComplexMatrix) -> ComplexMatrix:
    if a.rows != a.cols:
        raise DimensionError(f"inverse of non-square matrix {a.shape}")
    return ComplexMatrix.from_complex(inv(a.to_complex()))


def ctrace_real(a: ComplexMatrix, check_hermitian: bool = False) -> float:
    """Real part of the trace.

    With ``check_hermitian`` the imaginary part of the trace must be below
    1e-12 (relative to the real part), as it is for Hermitian arguments.
    """
    if a.rows != a.cols:
        raise DimensionError(f"trace of non-square matrix {a.shape}")
    tr_re = float(np.trace(a.re))
    if check_hermitian:
        tr_im = float(np.trace(a.im))
        if abs(tr_im) > 1e-12 * max(1.0, abs(tr_re)):
            raise DefinitenessError(f"imaginary trace {tr_im:.3e} on a Hermitian argument")
    return tr_re


def fro_norm(a: ComplexMatrix) -> float:
    return math.sqrt(float(np.sum(a.re * a.re) + np.sum(a.im * a.im)))


def logdet_hpd(a: ComplexMatrix) -> float:
    """Natural log-determinant of a Hermitian positive definite matrix."""
    if a.rows != a.cols:
        raise DimensionError(f"log-determinant of non-square matrix {a.shape}")
    return float(logdet_hpd_batch(a.to_complex()))


def nats_to_bits(x):
    return x / math.log(2.0)


# ---------------------------------------------------------------------------
# batched kernels on complex128 stacks


def herm(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def inv(a: np.ndarray) -> np.ndarray:
    """Inverse of each matrix in a stack by Gauss-Jordan elimination with
    partial pivoting.

    Raises
    ------
    SingularMatrixError
        If any pivot falls below ``SINGULAR_RTOL * max|A|`` of its matrix.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"inverse of non-square stack {a.shape}")
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    dtype = np.result_type(a.dtype, np.float64)
    m = a.reshape(-1, n, n).astype(dtype, copy=True)
    b = m.shape[0]
    x = np.broadcast_to(np.eye(n, dtype=dtype), (b, n, n)).copy()
    scale = np.abs(m).reshape(b, -1).max(axis=1) if n else np.zeros(b)
    rows = np.arange(b)
    for j in range(n):
        col = np.abs(m[:, j:, j])
        p = np.argmax(col, axis=1) + j
        piv_mag = col[rows, p - j]
        bad = piv_mag <= SINGULAR_RTOL * scale
        if np.any(bad):
            i = int(np.argmax(bad))
            raise SingularMatrixError(piv_mag[i], scale[i])
        swap = p != j
        if np.any(swap):
            idx = rows[swap]
            pj = p[swap]
            m[idx, j], m[idx, pj] = m[idx, pj].copy(), m[idx, j].copy()
            x[idx, j], x[idx, pj] = x[idx, pj].copy(), x[idx, j].copy()
        piv = m[:, j, j][:, None].copy()
        m[:, j] /= piv
        x[:, j] /= piv
        f = m[:, :, j].copy()
        f[:, j] = 0.0
        m -= f[:, :, None] * m[:, j][:, None, :]
        x -= f[:, :, None] * x[:, j][:, None, :]
    return x.reshape(*batch_shape, n, n)


def logdet_hpd_batch(a: np.ndarray) -> np.ndarray:
    """Natural log-determinant of each HPD matrix in a stack (Cholesky)."""
    a = np.asarray(a)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("matrix is not Hermitian positive definite") from exc
    d = np.real(np.diagonal(chol, axis1=-2, axis2=-1))
    return 2.0 * np.sum(np.log(d), axis=-1)
