"""Recurrent cost-memory decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .config import ModelConfig
from .cost_encoder import positional_embedding_tensor
from .cost_volume import CostVolume
from .encoders import ContextFeatures
from .layers import FFN, Conv2d, attention, probed_softmax

CROP = 9
_R = CROP // 2
# (dx, dy) offsets in row-major order over the 9x9 window
_OFFSETS = np.stack(np.meshgrid(np.arange(-_R, _R + 1), np.arange(-_R, _R + 1), indexing="xy"), -1).reshape(-1, 2)


class NonFiniteFlowError(FloatingPointError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite flow at decoder iteration {iteration}")


@dataclass
class FlowField:
    flow: np.ndarray  # (..., H, W, 2) as (dx, dy)
    valid: np.ndarray  # (..., H, W) bool

    @classmethod
    def dense(cls, flow) -> "FlowField":
        flow = np.asarray(flow)
        return cls(flow, np.ones(flow.shape[:-1], dtype=bool))


@dataclass
class DecoderState:
    hidden: Tensor  # (N, H, W, Dh)
    flow_coarse: Tensor  # (N, H, W, 2)
    keys: Tensor  # (N*H*W, K, D)
    values: Tensor  # (N*H*W, K, D)


def coords_grid(N: int, H: int, W: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys], -1), (N, H, W, 2)).astype(np.float64)


def crop_cost_patch(maps: Tensor, p: Tensor) -> Tensor:
    """Bilinear 9x9 crops centred on ``p``.

    maps: (B, H, W) or (B, H, W, 1) cost maps; p: (B, 2) target positions (x, y).
    Returns (B, 9, 9) where out[b, i, j] samples maps[b] at p[b] + (j - 4, i - 4).
    """
    maps = ad.as_tensor(maps)
    p = ad.as_tensor(p)
    if maps.ndim == 3:
        maps = maps.reshape(*maps.shape, 1)
    B = maps.shape[0]
    coords = p.reshape(B, 1, 2) + Tensor(_OFFSETS)
    return ad.bilinear_sample(maps, coords).reshape(B, CROP, CROP)


def convex_upsample(flow: Tensor, mask_logits: Tensor, factor: int = 8) -> Tensor:
    """Lift (N, H, W, 2) flow to (N, 8H, 8W, 2) as a convex mix of each 3x3 coarse
    neighbourhood (zero-padded), scaled by ``factor``.

    mask_logits: (N, H, W, 9 * factor * factor), softmaxed over the 9 neighbours.
    """
    N, H, W, _ = flow.shape
    f = factor
    if mask_logits.shape != (N, H, W, 9 * f * f):
        raise ad.ShapeError("convex_upsample", flow.shape, mask_logits.shape)
    mask = probed_softmax(mask_logits.reshape(N, H, W, 9, f * f), 3, "upsample_mask")
    padded = ad.pad2d(flow * float(f), 1, 1, 1, 1)
    neigh = ad.stack([padded[:, i : i + H, j : j + W, :] for i in range(3) for j in range(3)], axis=3)
    # (N, H, W, 9, f*f) x (N, H, W, 9, 2) -> (N, H, W, f*f, 2)
    up = ad.matmul(mask.transpose(0, 1, 2, 4, 3), neigh)
    up = up.reshape(N, H, W, f, f, 2).transpose(0, 1, 3, 2, 4, 5)
    return up.reshape(N, H * f, W * f, 2)


class CostDecoder(Module):
    def __init__(self, cfg: ModelConfig):
        D, Dh, hidden = cfg.D, cfg.Dh, cfg.ffn_ratio * cfg.D
        self.cfg = cfg
        self.key_ffn = FFN(D, hidden)
        self.value_ffn = FFN(D, hidden)
        self.crop_ffn = FFN(CROP * CROP, D, D)
        self.query_ffn = FFN(D, hidden)
        self.flow_enc = [Conv2d(2, Dh, 3), Conv2d(Dh, Dh, 3)]
        gru_in = Dh + D + CROP * CROP + Dh + Dh
        self.gate_z = Conv2d(gru_in, Dh, 3)
        self.gate_r = Conv2d(gru_in, Dh, 3)
        self.gate_q = Conv2d(gru_in, Dh, 3)
        self.flow_head = [Conv2d(Dh, Dh, 3), Conv2d(Dh, 2, 3, zero=cfg.zero_init_flow_head)]
        self.mask_head = [Conv2d(Dh, Dh, 3), Conv2d(Dh, 9 * 64, 1)]

    def project_memory(self, memory: Tensor) -> tuple:
        N, H, W, K, D = memory.shape
        T = memory.reshape(N * H * W, K, D)
        return self.key_ffn(T), self.value_ffn(T)

    def init_state(self, memory: Tensor, ctx: ContextFeatures) -> DecoderState:
        N, H, W = memory.shape[:3]
        keys, values = self.project_memory(memory)
        return DecoderState(ctx.hidden0, Tensor(np.zeros((N, H, W, 2))), keys, values)

    def query(self, cv: CostVolume, flow: Tensor) -> tuple:
        """Targets p = x + f(x) and their 9x9 cost crops, both per source pixel."""
        N, H, W, _ = flow.shape
        p = flow + Tensor(coords_grid(N, H, W))
        q = crop_cost_patch(cv.maps(), p.reshape(N * H * W, 2))
        return p, q

    def cost_query_attend(self, q: Tensor, p: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        """One dynamic positional query per pixel attends over its K memory tokens."""
        B = q.shape[0]
        pe = positional_embedding_tensor(p.reshape(B, 2), self.cfg.D)
        Q = self.query_ffn(self.crop_ffn(q.reshape(B, CROP * CROP)) + pe)
        c = attention(Q.reshape(B, 1, self.cfg.D), keys, values, self.cfg.num_heads, tag="decoder")
        return c.reshape(B, self.cfg.D)

    def gru_update(self, state: DecoderState, c: Tensor, q: Tensor, inject: Tensor) -> tuple:
        N, H, W, _ = state.flow_coarse.shape
        f = ad.gelu(self.flow_enc[0](state.flow_coarse))
        f = ad.gelu(self.flow_enc[1](f))
        x = ad.concat(
            [c.reshape(N, H, W, self.cfg.D), q.reshape(N, H, W, CROP * CROP), inject, f], axis=-1
        )
        h = state.hidden
        hx = ad.concat([h, x], axis=-1)
        z = ad.sigmoid(self.gate_z(hx))
        r = ad.sigmoid(self.gate_r(hx))
        cand = ad.tanh(self.gate_q(ad.concat([r * h, x], axis=-1)))
        h = h + z * (cand - h)
        delta = self.flow_head[1](ad.relu(self.flow_head[0](h)))
        new = DecoderState(h, state.flow_coarse + delta, state.keys, state.values)
        return new, delta

    def upsample(self, flow: Tensor, hidden: Tensor) -> Tensor:
        mask = self.mask_head[1](ad.relu(self.mask_head[0](hidden))) * 0.25
        return convex_upsample(flow, mask)

    def __call__(self, memory: Tensor, cv: CostVolume, ctx: ContextFeatures, iters: int,
                 cache_kv: bool | None = None) -> list:
        if iters < 1:
            raise ValueError(f"iters must be >= 1, got {iters}")
        cache_kv = self.cfg.cache_kv if cache_kv is None else cache_kv
        state = self.init_state(memory, ctx)
        preds = []
        for it in range(iters):
            if not cache_kv and it > 0:
                keys, values = self.project_memory(memory)
                state = DecoderState(state.hidden, state.flow_coarse, keys, values)
            p, q = self.query(cv, state.flow_coarse)
            c = self.cost_query_attend(q, p, state.keys, state.values)
            state, _ = self.gru_update(state, c, q, ctx.inject)
            if not np.all(np.isfinite(state.flow_coarse.data)):
                raise NonFiniteFlowError(it)
            preds.append(self.upsample(state.flow_coarse, state.hidden))
        self.last_state = state
        return preds


def sequence_loss(preds, gt, valid=None, gamma: float = 0.8) -> Tensor:
    """sum_i gamma^(N-i) * mean over valid of |pred_i - gt|."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if isinstance(gt, FlowField):
        gt, valid = gt.flow, gt.valid if valid is None else valid
    gt = np.asarray(gt)
    if valid is None:
        valid = np.ones(gt.shape[:-1], dtype=bool)
    if not np.any(valid):
        raise ValueError("sequence_loss: empty valid mask")
    n = len(preds)
    total = None
    for i, pred in enumerate(preds):
        term = ad.l1_loss(pred, gt, valid) * gamma ** (n - 1 - i)
        total = term if total is None else total + term
    return total
