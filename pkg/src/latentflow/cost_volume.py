"""All-pairs dot-product cost volume."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import FeatureMap


@dataclass
class CostVolume:
    vol: Tensor  # (N, H, W, H, W)
    scale: float

    @property
    def grid(self) -> tuple:
        return self.vol.shape[1], self.vol.shape[2]

    def maps(self) -> Tensor:
        """Cost maps stacked per source pixel as (N*H*W, H, W, 1)."""
        N, H, W = self.vol.shape[:3]
        return self.vol.reshape(N * H * W, H, W, 1)


def _grid(features) -> Tensor:
    g = features.grid if isinstance(features, FeatureMap) else ad.as_tensor(features)
    return g if g.ndim == 4 else g.reshape(1, *g.shape)


def build_cost_volume(src, tgt) -> CostVolume:
    """vol[n, a, b, c, d] = <src[n, a, b], tgt[n, c, d]> / sqrt(Df)."""
    s, t = _grid(src), _grid(tgt)
    if s.shape != t.shape:
        raise ad.ShapeError("build_cost_volume", s.shape, t.shape)
    N, H, W, Df = s.shape
    scale = 1.0 / math.sqrt(Df)
    sf = s.data.reshape(N, H * W, Df)
    tf = t.data.reshape(N, H * W, Df)
    # fixed accumulation order over channels keeps build(src, tgt) an exact transpose
    # of build(tgt, src), which a blocked BLAS product does not guarantee
    acc = np.zeros((N, H * W, H * W), dtype=sf.dtype)
    for k in range(Df):
        acc += sf[:, :, k, None] * tf[:, None, :, k]
    acc *= scale

    def backward(g):
        gs = (g @ tf * scale).reshape(s.shape) if s.requires_grad else None
        gt = (np.swapaxes(g, 1, 2) @ sf * scale).reshape(t.shape) if t.requires_grad else None
        return gs, gt

    vol = ad.custom_op(acc.reshape(N, H, W, H, W), (s, t), lambda g: backward(g.reshape(N, H * W, H * W)),
                       "cost_volume")
    return CostVolume(vol, scale)


def cost_map(cv: CostVolume, x, batch: int = 0) -> np.ndarray:
    """The H x W cost map of source pixel ``x = (row, col)``, returned as a view."""
    H, W = cv.grid
    i, j = x
    if not (0 <= i < H and 0 <= j < W):
        raise IndexError(f"cost_map: source pixel {x} outside grid {H}x{W}")
    return cv.vol.data[batch, i, j]
