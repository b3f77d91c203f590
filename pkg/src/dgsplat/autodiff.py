"""Reverse-mode automatic differentiation over dense numpy tensors.

A dynamic Wengert tape: while a :class:`Tape` is active, every primitive
records (output, inputs, backward rule) in execution order, and
``Tape.backward`` replays the records once, in reverse.  Without an active
tape the same primitives run forward-only, which is what the finite
difference oracle (``fd_check``) uses for its probe evaluations.

Default scalar type is 64-bit; a 32-bit mode exists for speed
(``set_default_dtype``) but all gradient checks are meant to run at 64-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "DTensor",
    "FdReport",
    "NumericError",
    "Tape",
    "absolute",
    "add",
    "as_dtensor",
    "broadcast_to",
    "clamp_max",
    "concat",
    "cos",
    "div",
    "exclusive_cumsum",
    "exp",
    "fd_check",
    "get_default_dtype",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "negate",
    "reshape",
    "scale",
    "set_default_dtype",
    "sigmoid",
    "sin",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "sum_",
    "take",
    "tanh",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated contract."""


class NumericError(ArithmeticError):
    """A numeric invariant failed (non-finite value, zero norm, ...)."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the scalar type used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class DTensor:
    """Dense tensor participating in reverse-mode differentiation.

    ``data`` is always a C-contiguous numpy array.  ``grad`` has the same
    shape, is allocated lazily by backward passes, and accumulates across
    them until explicitly reset.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DTensor":
        """A new leaf sharing nothing with the tape (data is copied)."""
        return DTensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}{flag})"

    # Operator sugar; all dispatch to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_dtensor(x) -> DTensor:
    if isinstance(x, DTensor):
        return x
    return DTensor(x)


def _wrap(data: np.ndarray) -> DTensor:
    # Fast internal constructor: data comes straight out of a numpy op.
    t = DTensor.__new__(DTensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    return t


# ---------------------------------------------------------------------------
# Tape


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for reverse replay.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss (inside or after the block).
    Repeated backward calls accumulate into ``.grad`` without re-zeroing.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape contexts must nest"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        """Release every recorded node and its saved intermediates."""
        self._nodes.clear()

    def backward(self, loss: DTensor) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from loss."""
        if not isinstance(loss, DTensor) or loss.size != 1:
            shape = getattr(loss, "shape", type(loss))
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        # Pending gradients, keyed by tensor identity.  Entries are popped as
        # their producing node is replayed, so each node runs exactly once.
        pending: dict[DTensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for out, inputs, bwd in reversed(self._nodes):
            g = pending.pop(out, None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for t, ig in zip(inputs, bwd(g)):
                if ig is None or not t.requires_grad:
                    continue
                if t in pending:
                    pending[t] = pending[t] + ig
                else:
                    pending[t] = ig
        # Whatever is left never appeared as a node output: the leaves.
        for t, g in pending.items():
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def _record(inputs: tuple, out: DTensor, bwd) -> DTensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._nodes.append((out, inputs, bwd))
    return out


class _suspend_tapes:
    """Temporarily disable recording (used by fd_check probe evaluations)."""

    def __enter__(self):
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()

    def __exit__(self, *exc):
        _TAPE_STACK[:] = self._saved
        return False


# ---------------------------------------------------------------------------
# Broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach it from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_ufunc(ufunc, a: DTensor, b: DTensor) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"cannot broadcast shapes {a.shape} and {b.shape} for '{ufunc.__name__}'"
        ) from None


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    out = _wrap(_broadcast_ufunc(np.add, a, b))

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bwd)


def sub(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    out = _wrap(_broadcast_ufunc(np.subtract, a, b))

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bwd)


def mul(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    out = _wrap(_broadcast_ufunc(np.multiply, a, b))

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bwd)


def div(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    out = _wrap(_broadcast_ufunc(np.divide, a, b))

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record((a, b), out, bwd)


def negate(x) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(-x.data)
    return _record((x,), out, lambda g: (-g,))


def scale(x, c: float) -> DTensor:
    """Multiply by a python scalar constant (no broadcasting machinery)."""
    x = as_dtensor(x)
    c = float(c)
    out = _wrap(x.data * c)
    return _record((x,), out, lambda g: (g * c,))


def exp(x) -> DTensor:
    x = as_dtensor(x)
    y = np.exp(x.data)
    out = _wrap(y)
    return _record((x,), out, lambda g: (g * y,))


def log(x) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(np.log(x.data))
    return _record((x,), out, lambda g: (g / x.data,))


def sqrt(x) -> DTensor:
    x = as_dtensor(x)
    y = np.sqrt(x.data)
    out = _wrap(y)
    return _record((x,), out, lambda g: (g / (2.0 * y),))


def tanh(x) -> DTensor:
    x = as_dtensor(x)
    y = np.tanh(x.data)
    out = _wrap(y)
    return _record((x,), out, lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> DTensor:
    x = as_dtensor(x)
    # Split by sign so neither branch exponentiates a large positive value.
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _wrap(y)
    return _record((x,), out, lambda g: (g * y * (1.0 - y),))


def sin(x) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(np.sin(x.data))
    return _record((x,), out, lambda g: (g * np.cos(x.data),))


def cos(x) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(np.cos(x.data))
    return _record((x,), out, lambda g: (-g * np.sin(x.data),))


def absolute(x) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(np.abs(x.data))
    return _record((x,), out, lambda g: (g * np.sign(x.data),))


def clamp_max(x, c: float) -> DTensor:
    """min(x, c) with gradient passing wherever x <= c."""
    x = as_dtensor(x)
    c = float(c)
    out = _wrap(np.minimum(x.data, c))
    mask = x.data <= c

    def bwd(g):
        return (g * mask,)

    return _record((x,), out, bwd)


# ---------------------------------------------------------------------------
# Linear algebra and shape primitives


def matmul(a, b) -> DTensor:
    a, b = as_dtensor(a), as_dtensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    try:
        out = _wrap(np.matmul(a.data, b.data))
    except ValueError:
        raise DimensionError(
            f"matmul batch dimensions do not broadcast: {a.shape} vs {b.shape}"
        ) from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _record((a, b), out, bwd)


def sum_(x, axis=None, keepdims: bool = False) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record((x,), out, bwd)


def mean(x, axis=None, keepdims: bool = False) -> DTensor:
    x = as_dtensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> DTensor:
    x = as_dtensor(x)
    out = _wrap(x.data.reshape(shape))
    orig = x.data.shape
    return _record((x,), out, lambda g: (g.reshape(orig),))


def transpose(x, axes) -> DTensor:
    x = as_dtensor(x)
    axes = tuple(axes)
    out = _wrap(np.transpose(x.data, axes))
    inv = tuple(int(i) for i in np.argsort(axes))
    return _record((x,), out, lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> DTensor:
    x = as_dtensor(x)
    shape = tuple(shape)
    try:
        out = _wrap(np.broadcast_to(x.data, shape).copy())
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    orig = x.data.shape
    return _record((x,), out, lambda g: (_unbroadcast(g, orig),))


def concat(tensors, axis: int = 0) -> DTensor:
    tensors = [as_dtensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gsw = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(gsw[offsets[i]:offsets[i + 1]], 0, axis)
            if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record(tuple(tensors), out, bwd)


def stack(tensors, axis: int = 0) -> DTensor:
    tensors = [as_dtensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of zero tensors")
    out = _wrap(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        gsw = np.moveaxis(g, axis, 0)
        return tuple(
            gsw[i].copy() if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record(tuple(tensors), out, bwd)


def take(x, indices, axis: int = 0) -> DTensor:
    """Gather along an axis; scalar index drops the axis like np.take."""
    x = as_dtensor(x)
    scalar = np.isscalar(indices) or (isinstance(indices, np.ndarray) and indices.ndim == 0)
    idx = int(indices) if scalar else np.asarray(indices, dtype=np.intp)
    out = _wrap(np.take(x.data, idx, axis=axis))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gsw = np.moveaxis(gx, axis, 0)
        if scalar:
            gsw[idx] += g
        else:
            np.add.at(gsw, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record((x,), out, bwd)


def exclusive_cumsum(x, axis: int = -1) -> DTensor:
    """y_i = sum of x_j for j < i along the axis (y_0 = 0)."""
    x = as_dtensor(x)
    out = _wrap(_excl_cumsum(x.data, axis))

    def bwd(g):
        # dL/dx_j = sum_{i > j} g_i: reversed exclusive cumsum.
        rev = np.flip(g, axis)
        return (np.flip(_excl_cumsum(rev, axis), axis),)

    return _record((x,), out, bwd)


def _excl_cumsum(a: np.ndarray, axis: int) -> np.ndarray:
    c = np.cumsum(a, axis=axis)
    sw = np.moveaxis(c, axis, 0)
    shifted = np.empty_like(sw)
    shifted[0] = 0.0
    shifted[1:] = sw[:-1]
    return np.moveaxis(shifted, 0, axis)


# ---------------------------------------------------------------------------
# Composite operations (built from recorded primitives)


def softmax(x, axis: int = -1) -> DTensor:
    """Numerically stabilized softmax; outputs sum to 1 along the axis."""
    x = as_dtensor(x)
    # Max subtraction with the max treated as a constant: softmax is shift
    # invariant, so the gradient is unchanged.
    m = np.max(x.data, axis=axis, keepdims=True)
    e = exp(sub(x, _wrap(m)))
    return div(e, sum_(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> DTensor:
    """Zero-mean unit-variance normalization along the axis, then affine."""
    x, gain, bias = as_dtensor(x), as_dtensor(gain), as_dtensor(bias)
    n = x.shape[axis]
    if gain.size != n or bias.size != n:
        raise DimensionError(
            f"layer_norm affine parameters have sizes {gain.size}/{bias.size}, "
            f"normalized axis has {n}"
        )
    mu = mean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=axis, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)


def l1_loss(a, b) -> DTensor:
    """Mean absolute difference over every element."""
    return mean(absolute(sub(a, b)))


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class FdReport:
    """Per-coordinate comparison of taped gradient vs central differences."""

    passed: bool
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    h: float
    tol: float

    def __str__(self):
        word = "pass" if self.passed else "FAIL"
        return f"fd_check {word}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def fd_check(f, x: DTensor, h: float = 1e-5, tol: float = 1e-6,
             floor: float = 1e-8, rel_floor: float = 1e-6) -> FdReport:
    """Check the taped gradient of scalar-valued ``f`` at ``x``.

    ``f`` must be pure and deterministic.  Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor, rel_floor*G)
    where G is the largest gradient magnitude over all coordinates; the
    scale-aware term keeps coordinates many orders below the dominant one
    from flagging pure cancellation noise.  Passes iff the max rel error is
    <= tol.  x.grad and x.requires_grad are restored on exit.
    """
    saved_grad, saved_req = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        tape = Tape()
        with tape:
            y = f(x)
        if not isinstance(y, DTensor) or y.size != 1:
            raise ContractError("fd_check needs a scalar-valued function")
        if not np.isfinite(y.data).all():
            raise NumericError("fd_check: non-finite function value at base point")
        tape.backward(y)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.grad, x.requires_grad = saved_grad, saved_req

    flat = x.data.reshape(-1)  # view: DTensor data is C-contiguous
    numeric = np.empty_like(flat)
    with _suspend_tapes():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(()))
            flat[i] = orig - h
            fm = float(f(x).data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"fd_check: non-finite probe value at coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * h)

    a, n = analytic.reshape(-1), numeric
    gmax = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)),
                       max(floor, rel_floor * gmax, 1e-300))
    rel = np.abs(a - n) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return FdReport(
        passed=bool(max_rel <= tol),
        max_rel_err=max_rel,
        rel_err=rel.reshape(x.data.shape),
        analytic=analytic,
        numeric=numeric.reshape(x.data.shape),
        h=h,
        tol=tol,
    )
