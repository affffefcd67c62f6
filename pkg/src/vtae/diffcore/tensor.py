"""Dense float64 tensors with tape-free reverse mode and tagged forward mode.

Every primitive builds its output through :func:`_make`, which

* rejects non-finite results,
* links the output to its parents when any parent tracks gradients, and
* pushes a tangent through the op's JVP rule while a :func:`jvp` call is
  active.  JVP rules are written with the primitives themselves, so a
  Jacobian obtained in forward mode can itself be differentiated in
  reverse mode (the curve losses rely on this).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """A precondition of an operation was not met."""


class NumericalError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _fwd_tag():
    return getattr(_state, "fwd_tag", None)


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _forward_tag(tag):
    prev = _fwd_tag()
    _state.fwd_tag = tag
    try:
        yield
    finally:
        _state.fwd_tag = prev


class Tensor:
    """n-dimensional float64 array, optionally tracking gradients."""

    __slots__ = (
        "data", "requires_grad", "grad", "_parents", "_backward", "_op",
        "tangent", "_ttag", "_retain",
    )
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("tensor constructed with non-finite entries")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self.tangent = None
        self._ttag = None
        self._retain = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after :meth:`backward`."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t):
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable, jvp_fn: Callable | None) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.tangent = None
    out._ttag = None
    out._retain = False
    out._op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    tag = _fwd_tag()
    if tag is not None and jvp_fn is not None:
        tans = [p.tangent if p._ttag is tag else None for p in parents]
        if any(t is not None for t in tans):
            with _forward_tag(None):
                tan = jvp_fn(tans, out)
            if tan is not None:
                out.tangent = tan
                out._ttag = tag
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _tsum(*terms):
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
                 lambda t, o: _broadcast_tangent(_tsum(t[0], t[1]), o.shape))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
                 lambda t, o: _broadcast_tangent(
                     _tsum(t[0], None if t[1] is None else neg(t[1])), o.shape))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    def jvp(t, o):
        return _broadcast_tangent(_tsum(
            None if t[0] is None else mul(t[0], b),
            None if t[1] is None else mul(a, t[1])), o.shape)

    return _make("mul", a.data * b.data, (a, b), bw, jvp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    if np.any(b.data == 0):
        raise NumericalError("div by zero")
    out_data = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out_data / b.data, b.shape))

    def jvp(t, o):
        return _broadcast_tangent(_tsum(
            None if t[0] is None else div(t[0], b),
            None if t[1] is None else neg(mul(div(o, b), t[1]))), o.shape)

    return _make("div", out_data, (a, b), bw, jvp)


def _broadcast_tangent(t, shape):
    if t is None or t.shape == tuple(shape):
        return t
    return add(t, zeros(shape))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,),
                 lambda t, o: neg(t[0]))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    def jvp(t, o):
        return mul(t[0], mul(p, power(a, p - 1)))

    return _make("pow", data, (a,), bw, jvp)


# -- elementwise unary -------------------------------------------------------

def relu(a) -> Tensor:
    """max(x, 0); the sub-gradient at 0 is taken as 0."""
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,),
                 lambda t, o: mul(t[0], Tensor(mask)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1 - s),),
                 lambda t, o: mul(t[0], mul(o, sub(1.0, o))))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    s = 1.0 / (1.0 + np.exp(-x))
    return _make("softplus", data, (a,), lambda g: (g * s,),
                 lambda t, o: mul(t[0], sigmoid(a)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    th = np.tanh(a.data)
    return _make("tanh", th, (a,), lambda g: (g * (1 - th * th),),
                 lambda t, o: mul(t[0], sub(1.0, mul(o, o))))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,), lambda t, o: mul(t[0], o))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,),
                 lambda t, o: div(t[0], a))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericalError("sqrt of negative value")
    r = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        dr = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
    zero = (r == 0).astype(np.float64)
    # derivative taken as 0 where the root vanishes, in both modes
    return _make("sqrt", r, (a,), lambda g: (g * dr,),
                 lambda t, o: mul(div(t[0], add(mul(2.0, o), zero)), 1.0 - zero))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),),
                 lambda t, o: mul(t[0], cos(a)))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),),
                 lambda t, o: neg(mul(t[0], sin(a))))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    def jvp(t, o):
        inner = reduce_sum(mul(o, t[0]), axis=axis, keepdims=True)
        return mul(o, sub(t[0], inner))

    return _make("softmax", s, (a,), bw, jvp)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    def jvp(t, o):
        return _broadcast_tangent(_tsum(
            None if t[0] is None else matmul(t[0], b),
            None if t[1] is None else matmul(a, t[1])), o.shape)

    return _make("matmul", data, (a, b), bw, jvp)


def _im2col(x, kh, kw, stride):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return cols, oh, ow


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OCkk weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    o, c, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ContractViolation(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    data = np.einsum("bcijxy,ocij->boxy", cols, w.data, optimize=True)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ContractViolation(f"conv2d: bias shape {bias.shape} does not match {o} filters")
        data = data + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gw = np.einsum("bcijxy,boxy->ocij", cols, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                    "boxy,oc->bcxy", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    def jvp(t, out):
        terms = []
        if t[0] is not None:
            terms.append(conv2d(t[0], w, None, stride, padding))
        if t[1] is not None:
            terms.append(conv2d(x, t[1], None, stride, padding))
        if bias is not None and t[2] is not None:
            terms.append(_broadcast_tangent(reshape(t[2], (1, o, 1, 1)), out.shape))
        return _broadcast_tangent(_tsum(*terms), out.shape)

    return _make("conv2d", data, parents, bw, jvp)


def batch_norm(x, gamma, beta, axes=(0,), eps: float = 1e-5) -> Tensor:
    """Training-mode batch normalization over ``axes``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(axes)
    _bshape("batch_norm", x, gamma)
    _bshape("batch_norm", x, beta)
    m = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - m
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    count = np.prod([x.shape[a] for a in axes])

    def bw(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gxhat = g * gamma.data
        gx = inv / count * (count * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gb

    def jvp(t, out):
        mt = reduce_mean(x, axes, True)
        xct = sub(x, mt)
        invt = div(1.0, sqrt(add(reduce_mean(mul(xct, xct), axes, True), eps)))
        xhat_t = mul(xct, invt)
        terms = []
        if t[0] is not None:
            tx = t[0]
            txh = mul(sub(sub(tx, reduce_mean(tx, axes, True)),
                          mul(xhat_t, reduce_mean(mul(xhat_t, tx), axes, True))), invt)
            terms.append(mul(gamma, txh))
        if t[1] is not None:
            terms.append(mul(t[1], xhat_t))
        if t[2] is not None:
            terms.append(t[2])
        return _broadcast_tangent(_tsum(*terms), out.shape)

    return _make("batch_norm", gamma.data * xhat + beta.data, (x, gamma, beta), bw, jvp)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view shape {a.shape} as {shape}") from None
    src = a.shape
    return _make("reshape", data, (a,), lambda g: (g.reshape(src),),
                 lambda t, o: reshape(t[0], shape))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),),
                 lambda t, o: transpose(t[0], axes))


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise ContractViolation("index with integer arrays, not tensors")
    data = a.data[idx]
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(data, dtype=np.float64), (a,), bw,
                 lambda t, o: getitem(t[0], idx))


def take(a, flat_index) -> Tensor:
    """Gather ``a.ravel()[flat_index]`` (shape follows ``flat_index``)."""
    a = as_tensor(a)
    flat_index = np.asarray(flat_index, dtype=np.intp)
    src = a.shape
    data = a.data.reshape(-1)[flat_index]

    def bw(g):
        full = np.zeros(a.size)
        np.add.at(full, flat_index.reshape(-1), g.reshape(-1))
        return (full.reshape(src),)

    return _make("take", data, (a,), bw, lambda t, o: take(t[0], flat_index))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ContractViolation(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    def jvp(t, o):
        parts = [tt if tt is not None else zeros(p.shape) for tt, p in zip(t, ts)]
        return concat(parts, axis)

    return _make("concat", data, ts, bw, jvp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else ts[0].ndim + 1 + axis
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], ax)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", data, (a,), bw, lambda t, o: reduce_sum(t[0], axis, keepdims))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    src = a.shape
    count = a.size / max(data.size, 1) if a.size else 1.0

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make("mean", data, (a,), bw, lambda t, o: reduce_mean(t[0], axis, keepdims))


def norm(a, axis=-1, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``; the derivative at the zero vector is 0."""
    a = as_tensor(a)
    return sqrt(add(reduce_sum(mul(a, a), axis=axis), eps))


def identity(a) -> Tensor:
    a = as_tensor(a)
    return _make("alias", a.data, (a,), lambda g: (g,), lambda t, o: t[0])


# -- reverse mode ------------------------------------------------------------

class ComputationRecord:
    """Operations reachable from a loss, parents before children."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationRecord":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def backward(loss: Tensor) -> ComputationRecord:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The graph below ``loss`` is released afterwards.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tracked tensor")
    record = ComputationRecord.from_output(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(record.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy()
        pgs = node._backward(g)
        for p, pg in zip(node._parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in record.ops:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    return record


def grad(fn: Callable[..., Tensor], *args):
    """Gradient of scalar ``fn(*args)`` with respect to each array argument."""
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in args]
    out = fn(*leaves)
    backward(out)
    res = [l.grad if l.grad is not None else np.zeros(l.shape) for l in leaves]
    return res[0] if len(res) == 1 else res


# -- forward mode ------------------------------------------------------------

def jvp(f: Callable[[Tensor], Tensor], z, v):
    """Return ``(f(z), J_f(z) v)``; both stay differentiable in reverse mode."""
    z = as_tensor(z)
    v = as_tensor(v)
    if v.shape != z.shape:
        raise ContractViolation(f"jvp: tangent shape {v.shape} differs from point shape {z.shape}")
    tag = object()
    with _forward_tag(tag):
        zin = identity(z)
        zin.tangent = v
        zin._ttag = tag
        y = f(zin)
    if y._ttag is tag and y.tangent is not None:
        return y, y.tangent
    return y, zeros(y.shape)


def jacobian(f: Callable[[Tensor], Tensor], z) -> Tensor:
    """Jacobian of ``f`` at ``z`` by one forward-mode pass per input coordinate.

    ``z`` of shape (J,) gives an (N, J) matrix; a batch (B, J) gives (B, N, J)
    provided ``f`` maps rows independently.
    """
    z = as_tensor(z)
    n_in = z.shape[-1]
    if n_in > 64:
        raise ContractViolation(f"jacobian: input dimension {n_in} exceeds 64")
    cols = []
    for j in range(n_in):
        e = np.zeros(z.shape)
        e[..., j] = 1.0
        _, t = jvp(f, z, e)
        cols.append(reshape(t, t.shape + (1,)))
    return concat(cols, axis=-1)
