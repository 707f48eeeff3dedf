"""Dense tensors with reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Storage is float32 unless float64 data is passed
explicitly (gradient checks do this).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        # ascontiguousarray promotes 0-d input to 1-d; keep scalars scalar
        self.data = np.ascontiguousarray(arr, dtype=dtype).reshape(arr.shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        # Interior gradients live in a side table so only leaves keep .grad.
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap a forward result and a gradient rule as a graph node.

    ``backward(g)`` must return an iterable of ``(parent, grad)`` pairs.
    """
    return _make(np.asarray(data), parents, backward, op)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: ((a, g * c),), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis; the only broadcast the engine supports."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")

    def backward(g):
        return ((x, g), (bias, g.reshape(-1, bias.shape[0]).sum(axis=0, dtype=np.float64)))

    return _make(x.data + bias.data, (x, bias), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: ((x, g * mask),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (within ~1e-3 of the erf form)."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return ((x, g * d),)

    return _make(out.astype(x.dtype), (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.data.astype(np.float64)
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    s = s.astype(x.dtype)
    return _make(s, (x,), lambda g: ((x, g * s * (1 - s)),), "sigmoid")


# -- reductions and reshapes -------------------------------------------------
def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: ((x, np.broadcast_to(g, x.shape)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: ((x, np.broadcast_to(g / n, x.shape)),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: ((x, g.transpose(inv)),), "transpose")


def take(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return ((x, full),)

    return _make(out, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(sl)]))
        return pieces

    return _make(out, tensors, backward, "concat")


def repeat(x: Tensor, n: int, axis: int = 0) -> Tensor:
    """Tile ``x`` ``n`` times along a new leading axis at ``axis``."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(out, (x,), lambda g: ((x, g.sum(axis=axis, dtype=np.float64)),), "repeat")


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)),
        "matmul",
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    return _make(
        np.matmul(a.data, b.data),
        (a, b),
        lambda g: (
            (a, np.matmul(g, b.data.transpose(0, 2, 1))),
            (b, np.matmul(a.data.transpose(0, 2, 1), g)),
        ),
        "bmm",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for inputs of any rank (last axis contracted)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(flat, weight)
    if bias is not None:
        y = add_bias(y, bias)
    return reshape(y, lead + (weight.shape[1],)) if x.ndim != 2 else y


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    v = x.data.astype(np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s64 = e / e.sum(axis=-1, keepdims=True)
    s = s64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * s64).sum(axis=-1, keepdims=True)
        return ((x, s64 * (g64 - dot)),)

    return _make(s, (x,), backward, "softmax")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d_k)) v, for 2-D inputs or 3-D batches."""
    if q.ndim != k.ndim or q.ndim != v.ndim or q.ndim not in (2, 3):
        raise ShapeError(f"attention: ranks of {q.shape}, {k.shape}, {v.shape} disagree")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q {q.shape} and k {k.shape} have different d_k")
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: sequence lengths of {q.shape}, {k.shape}, {v.shape} differ")
    d_k = q.shape[-1]
    if q.ndim == 2:
        logits = matmul(q, transpose(k))
    else:
        logits = bmm(q, transpose(k, (0, 2, 1)))
    weights = softmax_rows(scale(logits, 1.0 / math.sqrt(d_k)))
    out = matmul(weights, v) if q.ndim == 2 else bmm(weights, v)
    if return_weights:
        return out, weights
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis {d}")
    v = x.data.astype(np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gain.data + bias.data).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gx = g64 * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g64.reshape(-1, d)
        return (
            (x, dx),
            (gain, (flat_g * xhat.reshape(-1, d)).sum(axis=0)),
            (bias, flat_g.sum(axis=0)),
        )

    return _make(out, (x, gain, bias), backward, "layer_norm")


# -- convolution -------------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIHW weight."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (n*oh*ow, c*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        grads = [(weight, (gmat.T @ cols).reshape(weight.shape))]
        if bias is not None:
            grads.append((bias, gmat.sum(axis=0, dtype=np.float64)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            grads.append((x, dxp))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.astype(x.dtype), parents, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: window {size} larger than input {h}x{w}")
    crop = x.data[:, :, : oh * size, : ow * size]
    blocks = crop.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, :, : oh * size, : ow * size] = gb
        return ((x, full),)

    return _make(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def parameters_requiring_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
