"""Reverse-mode automatic differentiation over dense float64 arrays.

A define-by-run ``Tape`` records every operation whose inputs require
gradients; ``backward`` replays the tape once in reverse. Tensors are
treated as immutable after creation -- the optimizer mutates leaf
``.data`` only between tapes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "ContractError",
    "backward",
    "forward_op",
    "finite_difference_check",
    "FdReport",
    "add", "sub", "mul", "div", "matmul", "tsum", "tmean", "exp", "log",
    "sin", "cos", "sqrt", "relu", "sigmoid", "tanh", "softplus", "concat",
    "reshape", "broadcast_to", "power", "maximum", "conv2d", "avgpool2d",
    "normalize", "absolute",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input values fall outside an operation's numeric domain."""


class ContractError(ValueError):
    """An API precondition was violated."""


_OPEN_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations; inputs of a node always precede it."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _OPEN_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _OPEN_TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _OPEN_TAPES[-1] if _OPEN_TAPES else None


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
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
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routes through the module-level ops
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    The loss must be a scalar produced on the given (default: innermost
    active) tape. Gradients of all participating tensors are reset first,
    so each backward call reports exactly one loss.
    """
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    for out, inputs, _ in tape._nodes:
        out.grad = None
        for t in inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_data(a: Tensor, b: Tensor, op):
    try:
        return op(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}: {e}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_broadcast_data(a, b, np.add))

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_broadcast_data(a, b, np.subtract))

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_broadcast_data(a, b, np.multiply))

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = Tensor(_broadcast_data(a, b, np.divide))

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    if exponent != round(exponent) and np.any(a.data < 0.0):
        raise DomainError("fractional power of negative base")
    if exponent < 0 and np.any(a.data == 0.0):
        raise DomainError("negative power of zero")
    out = Tensor(a.data ** exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(out, (a,), bw)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_broadcast_data(a, b, np.maximum))

    def bw(g):
        # ties route the gradient to the first operand
        pick_a = np.broadcast_to(a.data, out.shape) >= np.broadcast_to(b.data, out.shape)
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise transcendental


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        return (g * out.data,)

    return _record(out, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def bw(g):
        return (g / a.data,)

    return _record(out, (a,), bw)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))

    def bw(g):
        return (g * np.cos(a.data),)

    return _record(out, (a,), bw)


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))

    def bw(g):
        return (-g * np.sin(a.data),)

    return _record(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    out = Tensor(np.sqrt(a.data))

    def bw(g):
        return (g / (2.0 * out.data),)

    return _record(out, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    pos = x >= 0
    y = np.empty_like(x)
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bw(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def bw(g):
        return (g * (1.0 - out.data * out.data),)

    return _record(out, (a,), bw)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def bw(g):
        pos = x >= 0
        s = np.empty_like(x)
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record(out, (a,), bw)


def absolute(a) -> Tensor:
    """|a| composed from relu so the subgradient at 0 is 0."""
    a = _as_tensor(a)
    return add(relu(a), relu(mul(a, -1.0)))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}: {e}") from None
    out = Tensor(data)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return g @ bd.T, np.outer(ad, g)
        if bd.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record(out, (a, b), bw)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _record(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.data.size, 1)

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _record(out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    out = Tensor(data)
    sizes = [t.data.shape[axis % t.data.ndim] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape to {shape}: {e}") from None
    out = Tensor(data)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast to {shape}: {e}") from None
    out = Tensor(data)

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _record(out, (a,), bw)


def _has_array_index(key) -> bool:
    if isinstance(key, tuple):
        return any(_has_array_index(k) for k in key)
    return isinstance(key, (np.ndarray, list))


def take(a, key) -> Tensor:
    """Basic slicing or integer-array row selection; backward scatters."""
    a = _as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise ShapeError(f"index {key!r} on shape {a.shape}: {e}") from None
    out = Tensor(np.array(data) if np.isscalar(data) else data.copy())

    def bw(g):
        gi = np.zeros_like(a.data)
        if _has_array_index(key):
            np.add.at(gi, key, g)
        else:
            gi[key] += g
        return (gi,)

    return _record(out, (a,), bw)


def normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``; zero-length vectors are a domain error."""
    a = _as_tensor(a)
    n = np.linalg.norm(a.data, axis=axis, keepdims=True)
    if np.any(n < 1e-12):
        raise DomainError("normalize of near-zero vector")
    unit = a.data / n
    out = Tensor(unit)

    def bw(g):
        # analytic Jacobian (I - u u^T) / |v| applied row-wise
        dot = (g * unit).sum(axis=axis, keepdims=True)
        return ((g - dot * unit) / n,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (C, out_h, out_w, kh, kw) -> (out_h*out_w, C*kh*kw)
    return win.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, -1)


def conv2d(x, weight, bias=None) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding k//2 (odd kernels).

    x: (C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,) or None.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d expects x (C,H,W) and weight (O,C,kh,kw)")
    cout, cin, kh, kw = weight.shape
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d channel mismatch: {x.shape[0]} vs {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d requires odd kernel sizes")
    ph, pw = kh // 2, kw // 2
    _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, w)
    wmat = weight.data.reshape(cout, -1)
    y = cols @ wmat.T
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError("conv2d bias must be (C_out,)")
        y = y + bias.data
    out = Tensor(y.T.reshape(cout, h, w))

    def bw(g):
        gr = g.reshape(cout, h * w)
        grad_w = (gr @ cols).reshape(weight.shape)
        grad_b = g.sum(axis=(1, 2)) if bias is not None else None
        gcols = gr.T @ wmat  # (HW, C*kh*kw)
        gcols = gcols.reshape(h, w, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + w] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        grad_x = gxp[:, ph:ph + h, pw:pw + w]
        if bias is not None:
            return grad_x, grad_w, grad_b
        return grad_x, grad_w

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bw)


def avgpool2d(x, kernel: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("avgpool2d expects (C, H, W)")
    c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avgpool2d: {h}x{w} not divisible by {kernel}")
    data = x.data.reshape(c, h // kernel, kernel, w // kernel, kernel).mean(axis=(2, 4))
    out = Tensor(data)

    def bw(g):
        gx = np.repeat(np.repeat(g, kernel, axis=1), kernel, axis=2) / (kernel * kernel)
        return (gx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# generic dispatch and verification

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "sqrt": sqrt,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "concat": concat,
    "slice": take,
    "reshape": reshape,
    "broadcast": broadcast_to,
    "power": power,
    "max": maximum,
    "conv2d": conv2d,
    "avgpool2d": avgpool2d,
    "normalize-vector": normalize,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op-kind name; records on the active tape as usual."""
    if kind not in _OPS:
        raise ContractError(f"unknown op-kind {kind!r}")
    return _OPS[kind](*inputs, **kwargs)


def op_kinds() -> tuple:
    return tuple(_OPS)


@dataclass
class FdReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple

    def __bool__(self) -> bool:
        return self.passed


def finite_difference_check(f, at: Tensor, h: float = 1e-6, rel_tol: float = 1e-5,
                            abs_floor: float = 1e-6) -> FdReport:
    """Compare the AD gradient of scalar-valued ``f`` at ``at`` against
    central differences, entry by entry.

    Relative error uses max(|ad|, |fd|, abs_floor) as denominator so that
    near-zero gradient entries are compared absolutely.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    base = np.array(at.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ContractError("finite_difference_check requires scalar f")
        if not np.isfinite(out.data).all():
            raise DomainError("f evaluated to a non-finite value")
        backward(out, tape)
    adg = probe.grad if probe.grad is not None else np.zeros_like(base)

    def value(arr):
        v = f(Tensor(arr))
        v = float(v.data.reshape(()))
        if not math.isfinite(v):
            raise DomainError("f evaluated to a non-finite value")
        return v

    fd = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fd[idx] = (value(plus) - value(minus)) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(adg), np.abs(fd)), abs_floor)
    rel = np.abs(adg - fd) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    max_err = float(rel.max()) if rel.size else 0.0
    return FdReport(max_err <= rel_tol, max_err, worst)
