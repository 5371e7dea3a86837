"""Building blocks shared by the encoders and decoder."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor

_probes: list | None = None


@contextlib.contextmanager
def record_softmax():
    """Collect ``(tag, probabilities)`` for every attention / mask softmax evaluated inside."""
    global _probes
    old, _probes = _probes, []
    try:
        yield _probes
    finally:
        _probes = old


def probed_softmax(x: Tensor, axis: int, tag: str) -> Tensor:
    out = ad.softmax(x, axis)
    if _probes is not None:
        _probes.append((tag, np.moveaxis(out.data, axis, -1).copy()))
    return out


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True, zero: bool = False):
        init = "zeros" if zero else "uniform_kaiming"
        self.weight = Parameter((din, dout), init, fan_in=din)
        self.bias = Parameter((dout,), init, fan_in=din) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError("linear", x.shape, self.weight.shape)
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 zero: bool = False):
        init = "zeros" if zero else "uniform_kaiming"
        fan_in = cin * kernel * kernel
        self.weight = Parameter((kernel, kernel, cin, cout), init, fan_in=fan_in)
        self.bias = Parameter((cout,), init, fan_in=fan_in)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter((dim,), "ones")
        self.bias = Parameter((dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class FFN(Module):
    """Two-layer perceptron with GELU."""

    def __init__(self, din: int, dhidden: int, dout: int | None = None):
        self.fc1 = Linear(din, dhidden)
        self.fc2 = Linear(dhidden, din if dout is None else dout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def attention_heads(dim: int) -> int:
    return max(1, dim // 32)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, D = x.shape
    x = x.reshape(*lead, L, heads, D // heads)
    n = x.ndim
    return x.transpose(*range(n - 3), n - 2, n - 3, n - 1)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = x.transpose(*range(n - 3), n - 2, n - 3, n - 1)
    *lead, L, h, d = x.shape
    return x.reshape(*lead, L, h * d)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, tag: str = "attention") -> Tensor:
    """Multi-head scaled dot-product attention over the second-to-last axis.

    q: (..., Lq, D), k: (..., Lk, D), v: (..., Lk, Dv); returns (..., Lq, Dv).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError("attention", q.shape, k.shape)
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ad.ShapeError("attention", q.shape, v.shape, f"dims not divisible by {heads} heads")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    n = kh.ndim
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    scores = ad.matmul(qh, kh.transpose(*range(n - 2), n - 1, n - 2)) * scale
    probs = probed_softmax(scores, -1, tag)
    return _merge_heads(ad.matmul(probs, vh))


class SelfAttention(Module):
    """Multi-head self-attention with separate q/k/v inputs widths.

    ``qk_dim`` lets queries and keys be projected from a wider input than values.
    """

    def __init__(self, dim: int, heads: int, qk_dim: int | None = None, zero_out: bool = False):
        qk_dim = dim if qk_dim is None else qk_dim
        self.q = Linear(qk_dim, dim)
        self.k = Linear(qk_dim, dim)
        self.v = Linear(dim, dim)
        self.out = Linear(dim, dim, zero=zero_out)
        self.heads = heads

    def __call__(self, x: Tensor, qk_in: Tensor | None = None, kv_x: Tensor | None = None,
                 kv_qk_in: Tensor | None = None, tag: str = "self_attention") -> Tensor:
        qk_in = x if qk_in is None else qk_in
        kv_x = x if kv_x is None else kv_x
        kv_qk_in = qk_in if kv_qk_in is None else kv_qk_in
        y = attention(self.q(qk_in), self.k(kv_qk_in), self.v(kv_x), self.heads, tag)
        return self.out(y)
