"""Reverse-mode automatic differentiation over real and complex arrays.

A :class:`Tape` records primitive applications in execution order;
:func:`backward` walks it once in reverse.  Values are numpy arrays with
arbitrary leading batch dimensions, so a whole mini-batch goes through
each primitive at once.

Complex gradient convention
---------------------------
The loss is always real.  For a complex variable ``z = x + iy`` the stored
gradient is the complex array ``dL/dx + 1j * dL/dy`` (twice the conjugate
Wirtinger derivative).  Under this convention the product rule for
``Y = A @ B`` reads ``gA = gY @ B^H`` and ``gB = A^H @ gY``, and the
inverse rule reads ``gA = -Y^H gY Y^H``.  Real variables receive the real
part of whatever flows into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .complex_tensor import DimensionError, herm, inv

__all__ = [
    "Tape", "Var", "const", "backward", "grad_check", "GradCheckReport", "ContractError",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "hermitian", "conj", "cinv",
    "relu", "batch_norm", "row_normalize", "fro_norm", "trace_real", "concat",
    "getitem", "reshape", "swapaxes", "transpose", "sum", "mean", "abs2", "real", "imag",
    "make_complex", "sqrt", "softpow_select", "complex_to_real", "real_to_complex",
    "where_mask",
]


class ContractError(ValueError):
    """A precondition of the autodiff API was violated."""


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self, update_stats: bool = True):
        self.nodes: list[tuple] = []
        self._next_id = 0
        # batch-norm running statistics are only touched when True
        self.update_stats = update_stats
        # pre-activations seen by relu, used by grad_check kink detection
        self.relu_inputs: list[np.ndarray] = []

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def leaf(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value), tape=self, requires_grad=True, name=name)
        return v

    def __len__(self):
        return len(self.nodes)


class Var:
    __slots__ = ("value", "grad", "tape", "id", "requires_grad", "name", "is_leaf")

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False,
                 name: str | None = None, is_leaf: bool = True):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = is_leaf
        self.id = tape._new_id() if tape is not None else 0

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def H(self):
        return hermitian(self)


def const(value) -> Var:
    return Var(np.asarray(value))


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _record(out_value, inputs: tuple, backward_fn: Callable) -> Var:
    tape = None
    for x in inputs:
        if x.requires_grad and x.tape is not None:
            tape = x.tape
            break
    if tape is None:
        # nothing to differentiate; pick up any tape for bookkeeping only
        return Var(out_value)
    out = Var(out_value, tape=tape, requires_grad=True, is_leaf=False)
    tape.nodes.append((out, inputs, backward_fn))
    return out


def _current_tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple, is_complex: bool) -> np.ndarray:
    if not is_complex and np.iscomplexobj(g):
        g = g.real
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _fix(g: np.ndarray, x: Var) -> np.ndarray:
    return _unbroadcast(g, x.value.shape, x.is_complex)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _record(a.value + b.value, (a, b), lambda g: (_fix(g, a), _fix(g, b)))


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _record(a.value - b.value, (a, b), lambda g: (_fix(g, a), _fix(-g, b)))


def neg(a) -> Var:
    a = _wrap(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Var:
    a = _wrap(a)
    return _record(a.value * c, (a,), lambda g: (_fix(g * np.conj(c), a),))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_fix(g * np.conj(bv), a), _fix(g * np.conj(av), b)))


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    y = av / bv

    def bw(g):
        ga = g / np.conj(bv)
        return _fix(ga, a), _fix(-ga * np.conj(y), b)

    return _record(y, (a, b), bw)


def sqrt(a) -> Var:
    a = _wrap(a)
    y = np.sqrt(a.value)
    return _record(y, (a,), lambda g: (g / (2.0 * y),))


def abs2(a) -> Var:
    """|a|^2 elementwise (real output)."""
    a = _wrap(a)
    av = a.value
    y = av.real ** 2 + av.imag ** 2 if np.iscomplexobj(av) else av * av
    return _record(y, (a,), lambda g: (2.0 * g * av,))


def real(a) -> Var:
    a = _wrap(a)
    return _record(np.real(a.value).copy(), (a,), lambda g: (_fix(g.astype(np.complex128), a),))


def imag(a) -> Var:
    a = _wrap(a)
    return _record(np.imag(a.value).copy(), (a,), lambda g: (_fix(1j * g, a),))


def make_complex(re, im) -> Var:
    re, im = _wrap(re), _wrap(im)
    return _record(re.value + 1j * im.value, (re, im),
                   lambda g: (_fix(g.real, re), _fix(g.imag, im)))


def conj(a) -> Var:
    a = _wrap(a)
    return _record(np.conj(a.value), (a,), lambda g: (np.conj(g),))


def relu(a) -> Var:
    a = _wrap(a)
    av = a.value
    tape = _current_tape(a)
    if tape is not None:
        tape.relu_inputs.append(av)
    mask = av > 0  # subgradient 0 at the kink
    return _record(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def where_mask(a, mask: np.ndarray) -> Var:
    """Multiply by a constant 0/1 mask (gradient is exactly zero where masked)."""
    a = _wrap(a)
    m = np.asarray(mask)
    return _record(np.where(m, a.value, 0), (a,), lambda g: (_fix(np.where(m, g, 0), a),))


# ---------------------------------------------------------------------------
# matrix primitives


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def bw(g):
        return _fix(g @ herm(bv), a), _fix(herm(av) @ g, b)

    return _record(av @ bv, (a, b), bw)


def hermitian(a) -> Var:
    a = _wrap(a)
    return _record(herm(a.value), (a,), lambda g: (herm(g),))


def transpose(a, axes) -> Var:
    a = _wrap(a)
    inv_axes = np.argsort(axes)
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv_axes),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Var:
    a = _wrap(a)
    return _record(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def cinv(a) -> Var:
    a = _wrap(a)
    y = inv(a.value)
    return _record(y, (a,), lambda g: (_fix(-(herm(y) @ g @ herm(y)), a),))


def trace_real(a) -> Var:
    a = _wrap(a)
    av = a.value
    if av.shape[-1] != av.shape[-2]:
        raise DimensionError(f"trace of non-square {av.shape}")
    n = av.shape[-1]
    y = np.real(np.trace(av, axis1=-2, axis2=-1))

    def bw(g):
        return (_fix(g[..., None, None] * np.eye(n), a),)

    return _record(y, (a,), bw)


def fro_norm(a) -> Var:
    """Frobenius norm over the last two axes."""
    a = _wrap(a)
    av = a.value
    y = np.sqrt(np.sum(np.abs(av) ** 2, axis=(-2, -1)))

    def bw(g):
        return (g[..., None, None] * av / np.maximum(y, 1e-300)[..., None, None],)

    return _record(y, (a,), bw)


def row_normalize(a, eps: float = 1e-12) -> Var:
    """Divide each row (last axis) by its Euclidean norm plus ``eps``."""
    a = _wrap(a)
    av = a.value
    nrm = np.sqrt(np.sum(np.abs(av) ** 2, axis=-1, keepdims=True))
    n = nrm + eps
    y = av / n

    def bw(g):
        inner = np.sum(np.real(np.conj(g) * av), axis=-1, keepdims=True)
        return (g / n - (inner / (n * n)) * av / np.maximum(nrm, 1e-300),)

    return _record(y, (a,), bw)


def softpow_select(s, alpha: float, axis: int = -1) -> Var:
    """Soft selection weights ``s_l^(alpha/2) / sum_j s_j^(alpha/2)``.

    ``s`` holds nonnegative squared correlations, so the weights equal
    ``|corr_l|^alpha`` normalised.  Evaluated as a softmax over
    ``(alpha/2) log s`` for range safety.
    """
    s = _wrap(s)
    sv = s.value
    tiny = np.finfo(np.float64).tiny
    z = 0.5 * alpha * np.log(np.maximum(sv, tiny))
    z = z - np.max(z, axis=axis, keepdims=True)
    ez = np.exp(z)
    e = ez / np.sum(ez, axis=axis, keepdims=True)

    def bw(g):
        gz = e * (g - np.sum(e * g, axis=axis, keepdims=True))
        return (gz * (0.5 * alpha) / np.maximum(sv, tiny),)

    return _record(e, (s,), bw)


# ---------------------------------------------------------------------------
# shape primitives


def concat(xs, axis: int = -1) -> Var:
    xs = [_wrap(x) for x in xs]
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(_fix(p, x) for p, x in zip(parts, xs))

    return _record(out, tuple(xs), bw)


def getitem(a, idx) -> Var:
    a = _wrap(a)
    av = a.value

    def bw(g):
        full = np.zeros(av.shape, dtype=np.result_type(av.dtype, g.dtype))
        np.add.at(full, idx, g)
        return (_fix(full, a),)

    return _record(av[idx], (a,), bw)


def reshape(a, shape) -> Var:
    a = _wrap(a)
    shp = a.value.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(shp),))


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = _wrap(a)
    av = a.value
    y = np.sum(av, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).astype(np.result_type(g.dtype, av.dtype)),)

    return _record(y, (a,), bw)


def mean(a, axis=None) -> Var:
    a = _wrap(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / n)


def complex_to_real(a) -> Var:
    """Real-vector representation of a stack of complex matrices.

    ``(..., m, n)`` complex maps to ``(..., 2*m*n)`` real, laid out as the
    column-major vectorisation of ``[Re(X); Im(X)]``.
    """
    a = _wrap(a)
    av = a.value
    m, n = av.shape[-2:]
    lead = av.shape[:-2]
    stacked = np.concatenate([av.real, av.imag], axis=-2)  # (..., 2m, n)
    y = np.swapaxes(stacked, -1, -2).reshape(*lead, 2 * m * n)

    def bw(g):
        gs = np.swapaxes(g.reshape(*lead, n, 2 * m), -1, -2)
        return (gs[..., :m, :] + 1j * gs[..., m:, :],)

    return _record(y, (a,), bw)


def real_to_complex(a, m: int, n: int) -> Var:
    """Inverse of :func:`complex_to_real`."""
    a = _wrap(a)
    av = a.value
    lead = av.shape[:-1]
    if av.shape[-1] != 2 * m * n:
        raise DimensionError(f"expected trailing size {2 * m * n}, got {av.shape[-1]}")
    st = np.swapaxes(av.reshape(*lead, n, 2 * m), -1, -2)
    y = st[..., :m, :] + 1j * st[..., m:, :]

    def bw(g):
        stacked = np.concatenate([g.real, g.imag], axis=-2)
        return (np.swapaxes(stacked, -1, -2).reshape(*lead, 2 * m * n),)

    return _record(y, (a,), bw)


# ---------------------------------------------------------------------------
# batch normalisation


def batch_norm(x, gamma, beta, state: dict, training: bool, eps: float = 1e-5,
               momentum: float = 0.99, mask: np.ndarray | None = None) -> Var:
    """Batch normalisation over every axis but the last.

    ``state`` holds ``running_mean`` and ``running_var``; training mode uses
    batch statistics and (if the tape allows it) updates the running
    averages, inference mode uses the running averages.  ``mask`` (shape of
    ``x`` without the last axis) restricts the batch statistics to the
    selected rows; unselected rows are still normalised but do not influence
    any other row.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xv = x.value
    d = xv.shape[-1]
    flat = xv.reshape(-1, d)
    gv, bv = gamma.value, beta.value
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if training:
        if m is None:
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            nb = flat.shape[0]
        else:
            nb = m.sum()
            mu = (m * flat).sum(axis=0) / nb
            var = (m * (flat - mu) ** 2).sum(axis=0) / nb
        tape = _current_tape(x, gamma, beta)
        if tape is None or tape.update_stats:
            state["running_mean"] = momentum * state["running_mean"] + (1 - momentum) * mu
            state["running_var"] = momentum * state["running_var"] + (1 - momentum) * var
    else:
        mu = state["running_mean"]
        var = state["running_var"]
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * rstd
    y = (xhat * gv + bv).reshape(xv.shape)

    def bw(g):
        gf = g.reshape(-1, d)
        dgamma = np.sum(gf * xhat, axis=0)
        dbeta = np.sum(gf, axis=0)
        dxhat = gf * gv
        if not training:
            dx = dxhat * rstd
        elif m is None:
            dx = rstd / nb * (nb * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            s1 = dxhat.sum(axis=0)
            s2 = np.sum(dxhat * xhat, axis=0)
            # every row sees the statistics; only masked rows move them
            dx = rstd * (dxhat - m * (s1 + xhat * s2) / nb)
        return dx.reshape(xv.shape), dgamma, dbeta

    return _record(y, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar real ``loss``.

    Returns a map from leaf ``Var.id`` to its gradient and also stores the
    gradient on each leaf's ``grad`` attribute.
    """
    lv = np.asarray(loss.value)
    if lv.size != 1 or np.iscomplexobj(lv):
        raise ContractError(f"loss must be a real scalar, got shape {lv.shape} dtype {lv.dtype}")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(lv, dtype=np.float64)}
    leaves: dict[int, Var] = {}
    for out, inputs, bw in reversed(tape.nodes):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        gin = bw(g)
        for x, gx in zip(inputs, gin):
            if not x.requires_grad or gx is None:
                continue
            if x.id in grads:
                grads[x.id] = grads[x.id] + gx
            else:
                grads[x.id] = gx
            if x.is_leaf:
                leaves[x.id] = x
    out = {}
    for vid, x in leaves.items():
        g = grads.get(vid)
        if g is None:
            continue
        if not x.is_complex and np.iscomplexobj(g):
            g = g.real
        x.grad = g
        out[vid] = g
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    threshold: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    flagged: list[tuple[str, int, float]] = field(default_factory=list)
    kinks: dict[str, int] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.flagged

    def summary(self) -> str:
        lines = []
        for name, err in self.max_rel_err.items():
            status = "ok" if err < self.threshold else "FAIL"
            lines.append(f"{name:24s} checked={self.checked[name]:6d} kinks={self.kinks.get(name, 0):4d} "
                         f"max_rel_err={err:.2e} {status}")
        return "\n".join(lines)


def _eval_loss(f, params: dict, record_relu: bool):
    tape = Tape(update_stats=False)
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(leaves)
    return float(np.asarray(loss.value).reshape(())), tape


def grad_check(f: Callable[[dict], Var], params: dict[str, np.ndarray], step: float = 1e-6,
               threshold: float = 1e-4, max_coords: int | None = None, seed: int = 0,
               abs_floor: float | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``f`` receives a dict of leaf Vars (same keys as ``params``) and must
    return a scalar loss Var; it has to be deterministic.  Complex
    parameters are perturbed along the real and imaginary axes separately.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor``
    defaults to ``1e-5 * max(1, |L|)``: at ``step = 1e-6`` the roundoff of
    a central difference is about ``1e-10 * |L|``, so smaller components
    carry no relative information.  A coordinate is a kink (excluded and
    counted) when perturbing it moves any relu pre-activation that lies
    within ``10 * step`` of zero, or flips any relu sign.
    """
    tape = Tape(update_stats=False)
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(leaves)
    backward(tape, loss)
    l0 = float(np.asarray(loss.value).reshape(()))
    base_relu = [r.copy() for r in tape.relu_inputs]
    near = [np.abs(r) < 10 * step for r in base_relu]
    floor = abs_floor if abs_floor is not None else 1e-5 * max(1.0, abs(l0))
    rng = np.random.default_rng(seed)
    report = GradCheckReport(threshold=threshold)

    def is_kink(t: Tape) -> bool:
        if len(t.relu_inputs) != len(base_relu):
            return True
        for r0, r1, nz in zip(base_relu, t.relu_inputs, near):
            if np.any((r0 > 0) != (r1 > 0)):
                return True
            if np.any(nz & (r0 != r1)):
                return True
        return False

    for name, val in params.items():
        val = np.asarray(val)
        g = leaves[name].grad
        if g is None:
            g = np.zeros_like(val)
        parts = [("re", 1.0)] + ([("im", 1j)] if np.iscomplexobj(val) else [])
        coords = [(flat, unit) for _, unit in parts for flat in range(val.size)]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst = 0.0
        nk = 0
        for flat, unit in coords:
            pp = dict(params)
            vp = val.astype(np.result_type(val.dtype, np.float64), copy=True)
            vm = vp.copy()
            vp.flat[flat] += step * unit
            vm.flat[flat] -= step * unit
            pp[name] = vp
            lp, tp = _eval_loss(f, pp, True)
            pp[name] = vm
            lm, tm = _eval_loss(f, pp, True)
            if is_kink(tp) or is_kink(tm):
                nk += 1
                continue
            num = (lp - lm) / (2 * step)
            gf = g.flat[flat]
            ana = float(np.real(gf)) if unit == 1.0 else float(np.imag(gf))
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            if err >= threshold:
                report.flagged.append((name, flat, err))
        report.max_rel_err[name] = worst
        report.kinks[name] = nk
        report.checked[name] = len(coords) - nk
    return report
