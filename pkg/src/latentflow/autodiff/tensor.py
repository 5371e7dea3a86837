"""Dense tensors with reverse-mode differentiation, backed by numpy.

Every differentiable primitive records its parents and a closure that maps
the output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order and accumulates gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, op: str, shape_a, shape_b, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


def get_precision() -> str:
    return "f64" if _state["dtype"] is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    """N-dimensional float array that can take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)


def custom_op(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register an operation defined outside this module; ``backward`` maps the output
    gradient to a tuple of parent gradients."""
    return _make(data, parents, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, "not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward, "gelu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, "batch dimensions not broadcastable") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} in shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine transform."""
    n = x.shape[-1]
    if n == 0:
        raise ValueError(f"layer_norm: empty last axis in shape {x.shape}")
    if weight.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", x.shape, weight.shape, "affine size must match last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    wd = weight.data

    def backward(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        gh = g * wd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(xhat * wd + bias.data, (x, weight, bias), backward, "layer_norm")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape, "element counts differ") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g) if _is_advanced(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, shape) from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat", ref.shape, t.shape, f"must agree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad axes 1 and 2 of an NHWC tensor."""
    H, W = x.shape[1], x.shape[2]
    widths = [(0, 0)] * x.ndim
    widths[1], widths[2] = (top, bottom), (left, right)
    out = np.pad(x.data, widths)
    return _make(out, (x,), lambda g: (g[:, top : top + H, left : left + W],), "pad2d")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ValueError(f"mean: empty reduction over shape {x.shape}")
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NHWC input with a (kh, kw, cin, cout) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape, "expected NHWC input and (kh, kw, cin, cout) kernel")
    N, H, W, C = x.shape
    kh, kw, _, cout = w.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, "kernel larger than padded input")
    if kh == 1 and kw == 1:
        cols = xp[:, : s * Ho : s, : s * Wo : s, :]
    else:
        cols = np.stack(
            [xp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] for i in range(kh) for j in range(kw)], axis=3
        )
    cols2 = cols.reshape(N * Ho * Wo, kh * kw * C)
    w2 = w.data.reshape(kh * kw * C, cout)
    out = (cols2 @ w2).reshape(N, Ho, Wo, cout)
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(N * Ho * Wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(N, Ho, Wo, kh * kw, C)
            gxp = np.zeros_like(xp)
            for k in range(kh * kw):
                i, j = divmod(k, kw)
                gxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += gcols[:, :, :, k, :]
            gx = gxp[:, p : p + H, p : p + W, :] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- sampling


def bilinear_sample(maps: Tensor, coords: Tensor) -> Tensor:
    """Sample ``maps`` (B, H, W, C) at real positions ``coords`` (B, P, 2).

    Coordinates are (x, y) in pixel units with x along the width axis. Corners
    that fall outside the map read as zero and receive no gradient.
    """
    if maps.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != maps.shape[0]:
        raise ShapeError("bilinear_sample", maps.shape, coords.shape, "expected (B,H,W,C) and (B,P,2)")
    B, H, W, C = maps.shape
    P = coords.shape[1]
    md = maps.data
    cx, cy = coords.data[..., 0], coords.data[..., 1]
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    wx = (cx - x0)[..., None]
    wy = (cy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.arange(B)[:, None]

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            xc, yc = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
            v = md[bidx, yc, xc] * ok[..., None]
            corners.append((v, ok, xc, yc))
    (v00, *_), (v10, *_), (v01, *_), (v11, *_) = corners
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10 + (1 - wx) * wy * v01 + wx * wy * v11

    def backward(g):
        gm = None
        if maps.requires_grad:
            weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
            flat = np.zeros((B * H * W, C), dtype=md.dtype)
            for (_, ok, xc, yc), wgt in zip(corners, weights):
                idx = ((bidx * H + yc) * W + xc).ravel()
                contrib = (g * wgt * ok[..., None]).reshape(-1, C)
                for c in range(C):
                    flat[:, c] += np.bincount(idx, weights=contrib[:, c], minlength=B * H * W)
            gm = flat.reshape(B, H, W, C)
        gc = None
        if coords.requires_grad:
            gx = ((1 - wy) * (v10 - v00) + wy * (v11 - v01)) * g
            gy = ((1 - wx) * (v01 - v00) + wx * (v11 - v10)) * g
            gc = np.stack([gx.sum(-1), gy.sum(-1)], axis=-1)
        return gm, gc

    return _make(out.reshape(B, P, C), (maps, coords), backward, "bilinear_sample")


# ---------------------------------------------------------------- losses


def l1_loss(pred: Tensor, target, valid=None) -> Tensor:
    """Mean absolute error over valid elements.

    ``valid`` masks leading positions; trailing channel axes are averaged too.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("l1_loss", pred.shape, target.shape)
    diff = tabs(pred - target)
    if valid is None:
        return mean(diff)
    v = np.asarray(valid, dtype=pred.data.dtype)
    while v.ndim < pred.ndim:
        v = v[..., None]
    count = np.broadcast_to(v, pred.shape).sum()
    if count == 0:
        raise ValueError("l1_loss: empty valid mask")
    return tsum(diff * Tensor(v)) * (1.0 / count)


def iter_graph(root: Tensor) -> Iterable[Tensor]:
    return topological_order(root)
