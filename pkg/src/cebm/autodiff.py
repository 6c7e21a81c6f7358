"""Small reverse-mode autodiff engine over dense float64 arrays.

Operations run eagerly.  When a ``Tape`` is active (``with tape:``) and at least
one input requires a gradient, the op appends a record holding its inputs and a
closure that maps the output cotangent to input cotangents.  ``backward`` walks
the records in reverse once; a tape cannot be replayed.

Example::

    tape = Tape()
    x = Tensor([3.0], requires_grad=True)
    with tape:
        y = ad.sum(ad.square(x))
    grads = backward(tape, y)   # {x: array([6.])}
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "TensorValue",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "forward_op",
    "finite_diff_check",
    "OPS",
    "add", "sub", "mul", "div", "scale", "negate", "square", "log", "exp",
    "matmul", "conv2d", "swish", "sigmoid", "relu", "leaky_relu", "softplus",
    "reshape", "sum", "mean", "logsumexp", "slice_last",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable-by-convention dense array with an optional gradient flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the named functions are the real API
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


TensorValue = Tensor


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("cebm_active_tape", default=None)


class Tape:
    """Ordered record of primitive ops.  Use as a context manager to activate."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed; call reset() before reuse")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def reset(self) -> None:
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: non-finite output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, _check=False)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.records.append(_Record(op, out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def negate(a: Tensor) -> Tensor:
    return _emit("negate", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), beta fixed at 1."""
    s = _sigmoid(a.data)
    return _emit("swish", a.data * s, (a,),
                 lambda g: (g * (s + a.data * s * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    d = np.where(mask, 1.0, slope)
    return _emit("leaky_relu", a.data * d, (a,), lambda g: (g * d,))


def softplus(a: Tensor) -> Tensor:
    return _emit("softplus", np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * _sigmoid(a.data),))


# --------------------------------------------------------------------------
# shape and reductions


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(n))


def logsumexp(a: Tensor, axis=-1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis=axis)
    soft = shifted / total

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", out, (a,), vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] outside extent {a.shape[-1]}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", a.data[..., start:stop], (a,), vjp)


# --------------------------------------------------------------------------
# linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation.  x: (N, C, H, W), w: (O, C, kh, kw)."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride} / padding {padding} invalid")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, wd)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: one (N*Ho*Wo, C*kh*kw) matrix shared by forward and backward
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(
                (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw)

    return _emit("conv2d", np.ascontiguousarray(out), (x, w), vjp)


# --------------------------------------------------------------------------
# dispatch surface

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "swish": swish,
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "softplus": softplus,
    "negate": negate,
    "square": square,
    "log": log,
    "exp": exp,
    "reshape": reshape,
    "sum": sum,
    "mean": mean,
    "logsumexp": logsumexp,
    "slice": slice_last,
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: non-finite input")
    return fn(*inputs, **(attrs or {}))


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep from scalar ``output``.

    Returns a dict keyed by leaf tensor.  With ``wrt`` given, exactly those
    leaves are reported (zeros when unused); otherwise every differentiable
    leaf that appears on the tape.
    """
    if tape.consumed:
        raise TapeError("tape already consumed")
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape.consumed = True
    cot: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = cot.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = np.asarray(gi, dtype=np.float64)
    if wrt is None:
        seen: dict[int, Tensor] = {}
        for rec in tape.records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    seen.setdefault(id(inp), inp)
        leaves = list(seen.values())
    else:
        leaves = list(wrt)
    grads = {}
    for leaf in leaves:
        g = cot.get(id(leaf))
        g = np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        grads[leaf] = g
    tape.records = []
    return grads


def finite_diff_check(f: Callable[[Tensor], Tensor], at, h: float = 1e-5) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` maps a tensor to a scalar tensor.  Error per coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if not h > 0:
        raise ValueError("finite_diff_check needs h > 0")
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        out = f(leaf)
    analytic = backward(tape, out, wrt=[leaf])[leaf].reshape(-1)
    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
