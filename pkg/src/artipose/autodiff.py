"""Tape-based reverse-mode differentiation over numpy arrays.

A deliberately small substrate: the fixed set of ops below is everything the
networks and the closed-form pose/hand math in this package need. Ops append
to a Tape in execution order, so the reverse sweep is a plain reversed loop
(a Wengert list), no graph search.

Reductions (sum/mean) accumulate in float64 and cast back to the input dtype;
everything else stays in the dtype of its inputs (float32 for training,
float64 for gradient checks).
"""

from __future__ import annotations

import weakref

import numpy as np

from .errors import ShapeMismatch


class Tape:
    """Execution-ordered op record plus parameter-use bookkeeping."""

    def __init__(self):
        self._ops = []  # (out Var, backward fn)
        self.param_uses = []  # (store, name, var, version)
        self.output = None  # convenience slots set by mlp_forward and friends
        self.input = None

    def record(self, out: "Var", backward):
        self._ops.append((out, backward))

    def backward(self, var: "Var", seed=None):
        """Reverse sweep from `var`; accumulates grads on every Var on the path."""
        if seed is None:
            if var.data.shape != ():
                raise ShapeMismatch("non-scalar output needs an explicit seed grad")
            seed = np.ones((), dtype=var.data.dtype)
        else:
            seed = np.asarray(seed, dtype=var.data.dtype)
            if seed.shape != var.data.shape:
                raise ShapeMismatch(
                    f"seed grad shape {seed.shape} != output shape {var.data.shape}"
                )
        var._add_grad(seed)
        for out, fn in reversed(self._ops):
            if out.grad is not None and fn is not None:
                fn(out.grad)


class Var:
    """An array node on a tape. Leaves created via const() or leaf().

    The back-reference to the tape is weak: the tape owns the graph (ops
    reference their input Vars), so a strong Var -> Tape edge would form a
    cycle and batch-sized graphs would pile up waiting for the cyclic GC.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape_ref", "__weakref__")

    def __init__(self, data, tape: Tape, requires_grad: bool):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._tape_ref = weakref.ref(tape)

    @property
    def tape(self) -> Tape:
        tape = self._tape_ref()
        if tape is None:
            raise RuntimeError("tape was garbage collected; keep it alive while building")
        return tape

    def _add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.data.shape

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.tape), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x, tape: Tape) -> Var:
    """A leaf that never receives gradient."""
    return Var(x, tape, requires_grad=False)


def leaf(x, tape: Tape) -> Var:
    """A leaf whose gradient is wanted (parameters, probed inputs)."""
    return Var(x, tape, requires_grad=True)


def _wrap(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else const(np.asarray(x), tape)


def _pair(a, b):
    if isinstance(a, Var):
        return a, _wrap(b, a.tape)
    if isinstance(b, Var):
        return _wrap(a, b.tape), b
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(g.dtype, copy=False)


def _binary(a, b, out_data, da, db):
    a, b = _pair(a, b)
    req = a.requires_grad or b.requires_grad
    out = Var(out_data, a.tape, req)
    if req:
        def back(g):
            if a.requires_grad:
                a._add_grad(_unbroadcast(da(g), a.data.shape))
            if b.requires_grad:
                b._add_grad(_unbroadcast(db(g), b.data.shape))
        a.tape.record(out, back)
    return out


def add(a, b):
    a, b = _pair(a, b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = _pair(a, b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = _pair(a, b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data
    return _binary(
        a, b, out_data, lambda g: g / b.data, lambda g: -g * out_data / b.data
    )


def matmul(a, b):
    """2-D matrix product; 1-D operands are promoted and squeezed back."""
    a, b = _pair(a, b)
    ad = a.data[None, :] if a.data.ndim == 1 else a.data
    bd = b.data[:, None] if b.data.ndim == 1 else b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out_data = ad @ bd
    if a.data.ndim == 1:
        out_data = out_data[0]
    if b.data.ndim == 1:
        out_data = out_data[..., 0]
    req = a.requires_grad or b.requires_grad
    out = Var(out_data, a.tape, req)
    if req:
        def back(g):
            g2 = g.reshape(ad.shape[0], bd.shape[1])
            if a.requires_grad:
                a._add_grad((g2 @ bd.T).reshape(a.data.shape))
            if b.requires_grad:
                b._add_grad((ad.T @ g2).reshape(b.data.shape))
        a.tape.record(out, back)
    return out


def _unary(a, out_data, da):
    out = Var(out_data, a.tape, a.requires_grad)
    if a.requires_grad:
        a.tape.record(out, lambda g: a._add_grad(da(g)))
    return out


def relu(a: Var):
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0), lambda g: g * mask)


def sigmoid(a: Var):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, out_data, lambda g: g * out_data * (1.0 - out_data))


def exp(a: Var):
    out_data = np.exp(a.data)
    return _unary(a, out_data, lambda g: g * out_data)


def log(a: Var):
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def sqrt(a: Var):
    """Square root with a zero-subgradient at exactly 0 (norms at zero)."""
    out_data = np.sqrt(a.data)
    safe = np.where(out_data > 0, 2.0 * out_data, np.inf)
    return _unary(a, out_data, lambda g: g / safe)


def sin(a: Var):
    return _unary(a, np.sin(a.data), lambda g: g * np.cos(a.data))


def cos(a: Var):
    return _unary(a, np.cos(a.data), lambda g: -g * np.sin(a.data))


def clamp_min(a: Var, lo: float):
    mask = a.data > lo
    return _unary(a, np.maximum(a.data, lo), lambda g: g * mask)


def vsum(a: Var, axis=None, keepdims=False):
    """Sum with float64 accumulation, cast back to the input dtype."""
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(
        a.data.dtype
    )

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape)

    return _unary(a, out_data, da)


def vmean(a: Var, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def vmax(a: Var, axis: int, keepdims=False):
    """Max along one axis; gradient routes to the first argmax (ties broken low)."""
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def da(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        return full

    return _unary(a, out_data, da)


def reshape(a: Var, shape):
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def transpose(a: Var):
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D array")
    return _unary(a, a.data.T, lambda g: g.T)


def permute(a: Var, axes):
    inverse = np.argsort(axes)
    return _unary(
        a, np.transpose(a.data, axes), lambda g: np.transpose(g, inverse)
    )


def take(a: Var, indices, axis: int = 0):
    """Gather along an axis; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def da(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return full

    return _unary(a, out_data, da)


def repeat_rows(a: Var, n: int):
    """(B, C) -> (B*n, C), each row repeated n times contiguously."""
    if a.data.ndim != 2:
        raise ShapeMismatch("repeat_rows expects a 2-D array")
    B, C = a.data.shape
    out_data = np.repeat(a.data, n, axis=0)
    return _unary(a, out_data, lambda g: g.reshape(B, n, C).sum(axis=1))


def concat(parts, axis: int = -1):
    parts = list(parts)
    tape = next(p.tape for p in parts if isinstance(p, Var))
    parts = [_wrap(p, tape) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    req = any(p.requires_grad for p in parts)
    out = Var(out_data, tape, req)
    if req:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def back(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    p._add_grad(g[tuple(sl)])

        tape.record(out, back)
    return out


def stack(parts, axis: int = 0):
    parts = list(parts)
    tape = next(p.tape for p in parts if isinstance(p, Var))
    parts = [_wrap(p, tape) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)
    req = any(p.requires_grad for p in parts)
    out = Var(out_data, tape, req)
    if req:
        def back(g):
            slices = np.moveaxis(g, axis, 0)
            for p, gs in zip(parts, slices):
                if p.requires_grad:
                    p._add_grad(gs)

        tape.record(out, back)
    return out


def cross3(a, b):
    """Cross product on (..., 3) arrays."""
    a, b = _pair(a, b)
    return _binary(
        a,
        b,
        np.cross(a.data, b.data),
        lambda g: np.cross(b.data, g),
        lambda g: np.cross(g, a.data),
    )


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Per-row CE of integer labels against logits (N, C); returns (N,)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeMismatch("softmax_cross_entropy expects (N, C) logits")
    lab = np.asarray(labels)
    if lab.shape != (z.shape[0],):
        raise ShapeMismatch(f"labels shape {lab.shape} != ({z.shape[0]},)")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    out_data = -logp[np.arange(z.shape[0]), lab]
    out = Var(out_data, logits.tape, logits.requires_grad)
    if logits.requires_grad:
        def back(g):
            p = ez / sez
            p[np.arange(z.shape[0]), lab] -= 1.0
            logits._add_grad(p * g[:, None])

        logits.tape.record(out, back)
    return out


def norm_rows(a: Var) -> Var:
    """Euclidean norm of each row of an (N, D) array; zero rows get zero grad."""
    return sqrt(vsum(mul(a, a), axis=1))
