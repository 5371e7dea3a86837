"""Shallow convolutional feature and context encoders (1/8 resolution)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .config import ModelConfig
from .layers import Conv2d


@dataclass
class FeatureMap:
    grid: Tensor  # (N, H, W, Df)
    source_size: tuple


@dataclass
class ContextFeatures:
    hidden0: Tensor  # (N, H, W, Dh), tanh
    inject: Tensor  # (N, H, W, Dh), relu


def as_image_batch(image) -> Tensor:
    """Accept (H, W, 3) or (N, H, W, 3) pixels in [0, 1]; return a batched tensor."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ad.ShapeError("encode", arr.shape, (None, None, None, 3), "expected RGB image")
    if not np.all(np.isfinite(arr)):
        raise ValueError("encode: image contains non-finite pixels")
    if arr.shape[1] < 16 or arr.shape[2] < 16:
        raise ValueError(f"encode: image {arr.shape[1]}x{arr.shape[2]} smaller than 16x16")
    return Tensor(arr)


class ConvEncoder(Module):
    """Three stride-2 convs (Df/4, Df/2, Df), two residual convs, and a 1x1 output head."""

    def __init__(self, dout: int, width: int):
        self.down = [
            Conv2d(3, width // 4, 3, stride=2),
            Conv2d(width // 4, width // 2, 3, stride=2),
            Conv2d(width // 2, width, 3, stride=2),
        ]
        self.res = [Conv2d(width, width, 3), Conv2d(width, width, 3)]
        self.head = Conv2d(width, dout, 1)

    def __call__(self, image) -> Tensor:
        x = as_image_batch(image)
        _, H, W, _ = x.shape
        x = x * 2.0 - 1.0
        ph, pw = (-H) % 8, (-W) % 8
        if ph or pw:
            x = ad.pad2d(x, 0, ph, 0, pw)
        for conv in self.down:
            x = ad.gelu(conv(x))
        for conv in self.res:
            x = x + ad.gelu(conv(x))
        return self.head(x)


class FeatureEncoder(Module):
    def __init__(self, cfg: ModelConfig):
        self.net = ConvEncoder(cfg.Df, cfg.Df)

    def __call__(self, image) -> FeatureMap:
        x = as_image_batch(image)
        f = self.net(x)
        # per-pixel standardization: strips the component shared by all cells, which
        # otherwise dominates every correlation at initialization
        n = f.shape[-1]
        f = ad.layer_norm(f, Tensor(np.ones(n)), Tensor(np.zeros(n)))
        return FeatureMap(f, (x.shape[1], x.shape[2]))


class ContextEncoder(Module):
    def __init__(self, cfg: ModelConfig):
        self.net = ConvEncoder(2 * cfg.Dh, cfg.Df)
        self.Dh = cfg.Dh

    def __call__(self, image) -> ContextFeatures:
        out = self.net(image)
        return ContextFeatures(ad.tanh(out[..., : self.Dh]), ad.relu(out[..., self.Dh :]))
