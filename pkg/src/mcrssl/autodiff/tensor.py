"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable primitive lives in ``REGISTRY`` as an :class:`Op` with a
``forward`` that returns ``(output, ctx)`` and a ``backward`` that maps the
output gradient to one gradient per input (``None`` for inputs that take no
gradient). Backward implementations are looked up through the registry at
backward time, so a test can swap one out.

Broadcasting is deliberately narrow: in a binary elementwise op the smaller
operand's shape must be a trailing suffix of the larger one (scalars are the
empty suffix). ``(T, d) + (d,)`` is fine, ``(T, d) * (T, 1)`` is rejected.
"""
from __future__ import annotations

import contextlib
import math
import os
from typing import Any, Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Op",
    "REGISTRY",
    "ShapeError",
    "allocation_count",
    "Tensor",
    "backward",
    "default_dtype",
    "forward_op",
    "grad_enabled",
    "no_grad",
    "precision",
    "tensor",
]


class ShapeError(ValueError):
    """Input shapes are invalid for the requested op."""


_state = {
    "dtype": np.dtype(np.float32),
    "grad": True,
    "debug": bool(os.environ.get("MCR_DEBUG")),
    "allocs": 0,
}


def allocation_count() -> int:
    """Number of tensors created so far in this process."""
    return _state["allocs"]


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_ctx", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        _state["allocs"] += 1
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx: Any = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        _state["allocs"] += 1
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._op = None
        t._parents = ()
        t._ctx = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------
    def backward(self, grad: np.ndarray | float | None = None) -> None:
        backward(self, grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return forward_op("add", self, _lift(other, self))

    def __radd__(self, other):
        return forward_op("add", _lift(other, self), self)

    def __sub__(self, other):
        return forward_op("sub", self, _lift(other, self))

    def __rsub__(self, other):
        return forward_op("sub", _lift(other, self), self)

    def __mul__(self, other):
        return forward_op("mul", self, _lift(other, self))

    def __rmul__(self, other):
        return forward_op("mul", _lift(other, self), self)

    def __neg__(self):
        return forward_op("mul", self, _lift(-1.0, self))

    def __matmul__(self, other):
        return forward_op("matmul", self, other)

    def sum(self, axis=None):
        return forward_op("sum", self, axis=axis)

    def mean(self, axis=None):
        return forward_op("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward_op("transpose", self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


# ---------------------------------------------------------------------------
# op machinery


class Op:
    name: str = ""

    def forward(self, *xs: np.ndarray, **attrs) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, ctx: Any, g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


REGISTRY: dict[str, Op] = {}


def register(cls: type[Op]) -> type[Op]:
    REGISTRY[cls.name] = cls()
    return cls


def forward_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run ``kind`` on ``inputs`` and record it on the graph if needed."""
    try:
        op = REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: expected Tensor inputs, got {type(t).__name__}")
    out, ctx = op.forward(*(t.data for t in inputs), **attrs)
    if _state["debug"] and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{kind} produced non-finite values")
    res = Tensor._wrap(out)
    if _state["grad"] and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res._op = kind
        res._parents = inputs
        res._ctx = ctx
    return res


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | float | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are kept
    only for the duration of the sweep.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones((), dtype=loss.dtype) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        in_grads = REGISTRY[node._op].backward(node._ctx, g)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            if prev is None:
                grads[key] = pg
            else:
                grads[key] = prev + pg


# ---------------------------------------------------------------------------
# broadcasting helpers


def _binary_shape(kind: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{kind}: shapes {a} and {b} are not trailing-suffix broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0).astype(g.dtype, copy=False)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


# ---------------------------------------------------------------------------
# elementwise


@register
class Add(Op):
    name = "add"

    def forward(self, a, b):
        _binary_shape(self.name, a.shape, b.shape)
        return a + b, (a.shape, b.shape)

    def backward(self, ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register
class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _binary_shape(self.name, a.shape, b.shape)
        return a - b, (a.shape, b.shape)

    def backward(self, ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register
class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _binary_shape(self.name, a.shape, b.shape)
        return a * b, (a, b)

    def backward(self, ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register
class Square(Op):
    name = "square"

    def forward(self, x):
        return x * x, x

    def backward(self, x, g):
        return (g * (x + x),)


@register
class Sqrt(Op):
    name = "sqrt"

    def forward(self, x):
        y = np.sqrt(x)
        return y, y

    def backward(self, y, g):
        return (g * (0.5 / y),)


@register
class Exp(Op):
    name = "exp"

    def forward(self, x):
        y = np.exp(x)
        return y, y

    def backward(self, y, g):
        return (g * y,)


@register
class Log(Op):
    name = "log"

    def forward(self, x):
        return np.log(x), x

    def backward(self, x, g):
        return (g / x,)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


@register
class Gelu(Op):
    """tanh approximation of GELU."""

    name = "gelu"

    def forward(self, x):
        t = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))
        return 0.5 * x * (1.0 + t), (x, t)

    def backward(self, ctx, g):
        x, t = ctx
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


@register
class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims disagree, {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    def backward(self, ctx, g):
        a, b = ctx
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


@register
class Transpose(Op):
    name = "transpose"

    def forward(self, x, axes=None):
        if axes is None:
            axes = tuple(reversed(range(x.ndim)))
        axes = tuple(int(a) % max(x.ndim, 1) for a in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
        return np.ascontiguousarray(x.transpose(axes)), np.argsort(axes)

    def backward(self, inv, g):
        return (g.transpose(inv),)


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, x, shape):
        shape = tuple(int(s) for s in shape)
        known = [s for s in shape if s != -1]
        if shape.count(-1) > 1 or any(s < -1 for s in shape):
            raise ShapeError(f"reshape: bad target {shape}")
        n = math.prod(known)
        if (-1 in shape and (n == 0 or x.size % n)) or (-1 not in shape and n != x.size):
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return x.reshape(shape), x.shape

    def backward(self, shape, g):
        return (g.reshape(shape),)


@register
class Concat(Op):
    name = "concat"

    def forward(self, *xs, axis=0):
        if not xs:
            raise ShapeError("concat: no inputs")
        nd = xs[0].ndim
        ax = axis % nd
        for x in xs[1:]:
            if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
                raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}")
        sizes = [x.shape[ax] for x in xs]
        return np.concatenate(xs, axis=ax), (ax, np.cumsum(sizes)[:-1])

    def backward(self, ctx, g):
        ax, cuts = ctx
        return tuple(np.split(g, cuts, axis=ax))


@register
class Slice(Op):
    """Index along one axis with an int, a python slice or an index array."""

    name = "slice"

    def forward(self, x, index, axis=0):
        if x.ndim == 0:
            raise ShapeError("slice: cannot index a 0-d tensor")
        ax = axis % x.ndim
        n = x.shape[ax]
        if isinstance(index, (int, np.integer)):
            if not -n <= index < n:
                raise ShapeError(f"slice: index {index} out of range for size {n}")
        elif not isinstance(index, slice):
            index = np.asarray(index, dtype=np.intp)
            if index.ndim != 1 or (index.size and (index.min() < -n or index.max() >= n)):
                raise ShapeError(f"slice: bad index array for size {n}")
        key = (slice(None),) * ax + (index,)
        dup = isinstance(index, np.ndarray) and np.unique(index % n).size != index.size
        return x[key], (x.shape, key, dup)

    def backward(self, ctx, g):
        shape, key, dup = ctx
        out = np.zeros(shape, dtype=g.dtype)
        if dup:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)


@register
class Sum(Op):
    name = "sum"

    def forward(self, x, axis=None):
        axes = _norm_axes(axis, x.ndim)
        return np.sum(x, axis=axes), (x.shape, axes)

    def backward(self, ctx, g):
        shape, axes = ctx
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
        return (np.broadcast_to(g.reshape(kept), shape),)


@register
class Mean(Op):
    name = "mean"

    def forward(self, x, axis=None):
        axes = _norm_axes(axis, x.ndim)
        count = math.prod(x.shape[a] for a in axes)
        if count == 0:
            raise ShapeError("mean: empty reduction")
        return np.mean(x, axis=axes), (x.shape, axes, count)

    def backward(self, ctx, g):
        shape, axes, count = ctx
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
        return (np.broadcast_to(g.reshape(kept) * (1.0 / count), shape).astype(g.dtype, copy=False),)


# ---------------------------------------------------------------------------
# normalisation and activations


@register
class Softmax(Op):
    name = "softmax"

    def forward(self, x, axis=-1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        y = z / z.sum(axis=axis, keepdims=True)
        return y, (y, axis)

    def backward(self, ctx, g):
        y, axis = ctx
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@register
class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        return y, (y, axis)

    def backward(self, ctx, g):
        y, axis = ctx
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


@register
class LayerNorm(Op):
    """Normalise over one axis; optional affine weight/bias on the last axis."""

    name = "layer_norm"

    def forward(self, x, weight=None, bias=None, axis=-1, eps=1e-5):
        ax = axis % x.ndim
        if weight is not None and (ax != x.ndim - 1 or weight.shape != (x.shape[-1],)):
            raise ShapeError(f"layer_norm: weight {weight.shape} does not match last axis of {x.shape}")
        if bias is not None and bias.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm: bias {bias.shape} does not match last axis of {x.shape}")
        mu = x.mean(axis=ax, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=ax, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        y = xhat
        if weight is not None:
            y = y * weight
        if bias is not None:
            y = y + bias
        return y, (xhat, rstd, weight, ax, bias is not None)

    def backward(self, ctx, g):
        xhat, rstd, weight, ax, has_bias = ctx
        gx = g * weight if weight is not None else g
        n = xhat.shape[ax]
        dx = rstd * (gx - gx.sum(axis=ax, keepdims=True) / n - xhat * (gx * xhat).sum(axis=ax, keepdims=True) / n)
        out = [dx]
        if weight is not None:
            out.append(_unbroadcast(g * xhat, weight.shape))
        if has_bias:
            out.append(_unbroadcast(g, (xhat.shape[-1],)))
        return tuple(out)


@register
class Conv1d(Op):
    """Time-major 1-D convolution: x (L, C_in), w (k, C_in, C_out) -> (T, C_out)."""

    name = "conv1d"

    def forward(self, x, w, stride=1, pad_left=0, pad_right=0):
        if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv1d: bad shapes x={x.shape} w={w.shape}")
        k, cin, cout = w.shape
        xp = np.pad(x, ((pad_left, pad_right), (0, 0))) if (pad_left or pad_right) else x
        lp = xp.shape[0]
        if lp < k:
            raise ShapeError(f"conv1d: input length {x.shape[0]} shorter than kernel {k}")
        t = (lp - k) // stride + 1
        s0, s1 = xp.strides
        cols = np.lib.stride_tricks.as_strided(xp, (t, k, cin), (s0 * stride, s0, s1))
        # reshape can return an overlapping view here; BLAS needs a real copy
        cols = np.ascontiguousarray(cols).reshape(t, k * cin)
        w2 = w.reshape(k * cin, cout)
        return cols @ w2, (cols, w2, w.shape, x.shape[0], lp, stride, pad_left)

    def backward(self, ctx, g):
        cols, w2, wshape, length, lp, stride, pad_left = ctx
        k, cin, _ = wshape
        t = g.shape[0]
        gw = (cols.T @ g).reshape(wshape)
        gcols = (g @ w2.T).reshape(t, k, cin)
        gxp = np.zeros((lp, cin), dtype=g.dtype)
        span = stride * (t - 1) + 1
        for j in range(k):
            gxp[j:j + span:stride] += gcols[:, j]
        return gxp[pad_left:pad_left + length], gw


# ---------------------------------------------------------------------------
# fused ops (fewer graph nodes on the hot path)


@register
class Linear(Op):
    """``x @ w + b`` for x (..., k), w (k, m), b (m,)."""

    name = "linear"

    def forward(self, x, w, b):
        if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bad shapes x={x.shape} w={w.shape} b={b.shape}")
        return x @ w + b, (x, w)

    def backward(self, ctx, g):
        x, w = ctx
        g2 = g.reshape(-1, g.shape[-1])
        return g @ w.T, x.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)


@register
class Attention(Op):
    """Multi-head scaled dot-product self-attention on packed projections.

    Inputs: qkv (n, 3d) laid out as [q | k | v], each split into ``n_heads``
    contiguous head slices, and optionally a constant (n_heads, n, n)
    multiplier applied to the attention probabilities (dropout). Output (n, d).
    """

    name = "attention"

    def forward(self, qkv, drop=None, n_heads=1):
        if qkv.ndim != 2 or qkv.shape[1] % (3 * n_heads):
            raise ShapeError(f"attention: qkv {qkv.shape} not divisible into 3 x {n_heads} heads")
        n = qkv.shape[0]
        d = qkv.shape[1] // 3
        dh = d // n_heads
        if drop is not None and drop.shape != (n_heads, n, n):
            raise ShapeError(f"attention: dropout multiplier {drop.shape} != {(n_heads, n, n)}")
        heads = qkv.reshape(n, 3, n_heads, dh).transpose(1, 2, 0, 3)
        q, k, v = heads[0], heads[1], heads[2]
        scale = 1.0 / math.sqrt(dh)
        s = (q @ k.transpose(0, 2, 1)) * qkv.dtype.type(scale)
        z = np.exp(s - s.max(axis=-1, keepdims=True))
        p = z / z.sum(axis=-1, keepdims=True)
        pd = p * drop if drop is not None else p
        o = pd @ v
        out = np.ascontiguousarray(o.transpose(1, 0, 2)).reshape(n, d)
        return out, (q, k, v, p, pd, drop, scale)

    def backward(self, ctx, g):
        q, k, v, p, pd, drop, scale = ctx
        h, n, dh = q.shape
        go = g.reshape(n, h, dh).transpose(1, 0, 2)
        gv = pd.transpose(0, 2, 1) @ go
        gpd = go @ v.transpose(0, 2, 1)
        gp = gpd * drop if drop is not None else gpd
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs = gs * gs.dtype.type(scale)
        gq = gs @ k
        gk = gs.transpose(0, 2, 1) @ q
        gqkv = np.stack([gq, gk, gv]).transpose(2, 0, 1, 3).reshape(n, 3 * h * dh)
        return (gqkv, None) if drop is not None else (gqkv,)
