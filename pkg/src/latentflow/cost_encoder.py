"""Cost-volume encoder: patchify cost maps, summarize them with latent codewords,
then mix the latent tokens with alternate-group transformer layers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .config import ConfigError, ModelConfig
from .cost_volume import CostVolume
from .encoders import ContextFeatures
from .layers import FFN, Conv2d, LayerNorm, Linear, SelfAttention, attention


def _frequencies(dim: int) -> np.ndarray:
    if dim % 4:
        raise ValueError(f"positional embedding dim {dim} must be divisible by 4")
    j = np.arange(dim // 4)
    return 1.0 / 10000.0 ** (4.0 * j / dim)


def positional_embedding(p, dim: int) -> np.ndarray:
    """Sine/cosine embedding of 2D positions ``p[..., (x, y)]``.

    The first half encodes x and the second half y, each as interleaved
    (sin, cos) pairs at frequencies 1 / 10000^(4j/dim).
    """
    omega = _frequencies(dim)
    p = np.asarray(p, dtype=np.float64)
    halves = []
    for c in (0, 1):
        ang = p[..., c, None] * omega
        halves.append(np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*p.shape[:-1], dim // 2))
    return np.concatenate(halves, axis=-1)


def positional_embedding_tensor(p: Tensor, dim: int) -> Tensor:
    """Differentiable counterpart of :func:`positional_embedding`."""
    omega = Tensor(_frequencies(dim))
    lead = p.shape[:-1]
    halves = []
    for c in (0, 1):
        ang = p[..., c : c + 1] * omega
        halves.append(ad.stack([ad.sin(ang), ad.cos(ang)], axis=-1).reshape(*lead, dim // 2))
    return ad.concat(halves, axis=-1)


def _to_windows(x: Tensor, s: int) -> Tensor:
    N, K, H, W, C = x.shape
    x = x.reshape(N, K, H // s, s, W // s, s, C).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(N * K * (H // s) * (W // s), s * s, C)


def _from_windows(x: Tensor, shape: tuple, s: int) -> Tensor:
    N, K, H, W, _ = shape
    C = x.shape[-1]
    x = x.reshape(N, K, H // s, W // s, s, s, C).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(N, K, H, W, C)


def _pool(x: Tensor, s: int) -> Tensor:
    N, K, H, W, C = x.shape
    x = x.reshape(N, K, H // s, s, W // s, s, C).mean(axis=(3, 5))
    return x.reshape(N * K, (H // s) * (W // s), C)


class AGTLayer(Module):
    """Intra-cost-map self-attention over each pixel's K tokens, then inter-cost-map
    spatially separable attention over the H x W grid of each latent index."""

    def __init__(self, cfg: ModelConfig, zero_attn_out: bool = False):
        D, Dh, heads = cfg.D, cfg.Dh, cfg.num_heads
        hidden = cfg.ffn_ratio * D
        self.window = cfg.window
        self.intra_norm = LayerNorm(D)
        self.intra_attn = SelfAttention(D, heads, zero_out=zero_attn_out)
        self.intra_ffn_norm = LayerNorm(D)
        self.intra_ffn = FFN(D, hidden)
        self.local_norm = LayerNorm(D)
        self.local_attn = SelfAttention(D, heads, qk_dim=D + Dh)
        self.global_norm = LayerNorm(D)
        self.global_attn = SelfAttention(D, heads, qk_dim=D + Dh)
        self.inter_ffn_norm = LayerNorm(D)
        self.inter_ffn = FFN(D, hidden)

    def intra(self, T: Tensor) -> Tensor:
        N, H, W, K, D = T.shape
        x = T.reshape(N * H * W, K, D)
        x = x + self.intra_attn(self.intra_norm(x), tag="intra")
        x = x + self.intra_ffn(self.intra_ffn_norm(x))
        return x.reshape(N, H, W, K, D)

    def inter(self, T: Tensor, context: ContextFeatures) -> Tensor:
        N, H, W, K, D = T.shape
        s = self.window
        if H % s or W % s:
            raise ConfigError(
                f"grid {H}x{W} not divisible by window {s}; pad images to multiples of {8 * s} pixels"
            )
        inject = context.inject
        ctx = ad.broadcast_to(inject.reshape(N, 1, H, W, inject.shape[-1]), (N, K, H, W, inject.shape[-1]))
        t = T.transpose(0, 3, 1, 2, 4)
        shape = t.shape

        u = self.local_norm(t)
        qk = ad.concat([u, ctx], axis=-1)
        y = self.local_attn(_to_windows(u, s), qk_in=_to_windows(qk, s), tag="inter_local")
        t = t + _from_windows(y, shape, s)

        u = self.global_norm(t)
        qk = ad.concat([u, ctx], axis=-1)
        y = self.global_attn(
            u.reshape(N * K, H * W, D),
            qk_in=qk.reshape(N * K, H * W, qk.shape[-1]),
            kv_x=_pool(u, s),
            kv_qk_in=_pool(qk, s),
            tag="inter_global",
        )
        t = t + y.reshape(shape)

        t = t + self.inter_ffn(self.inter_ffn_norm(t))
        return t.transpose(0, 2, 3, 1, 4)

    def __call__(self, T: Tensor, context: ContextFeatures) -> Tensor:
        return self.inter(self.intra(T), context)


class CostEncoder(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        Dp, D = cfg.Dp, cfg.D
        self.cfg = cfg
        self.patch = [
            Conv2d(1, Dp // 4, 3, stride=2),
            Conv2d(Dp // 4, Dp // 2, 3, stride=2),
            Conv2d(Dp // 2, Dp, 3, stride=2),
        ]
        self.codewords = Parameter((cfg.K, D), "normal")
        self.key = Linear(2 * Dp, D)
        self.value = Linear(2 * Dp, D)
        self.layers = [AGTLayer(cfg) for _ in range(cfg.agt_depth)]

    def patchify(self, maps: Tensor) -> Tensor:
        """(B, H, W[, 1]) cost maps -> (B, ceil(H/8), ceil(W/8), Dp) patch features."""
        if maps.ndim == 3:
            maps = maps.reshape(*maps.shape, 1)
        H, W = maps.shape[1], maps.shape[2]
        ph, pw = (-H) % 8, (-W) % 8
        x = ad.pad2d(maps, 0, ph, 0, pw) if ph or pw else maps
        for conv in self.patch:
            x = ad.relu(conv(x))
        return x

    def patch_positions(self, h: int, w: int) -> np.ndarray:
        """Patch-grid positional embeddings, (h, w, Dp); positions are (col, row) indices."""
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return positional_embedding(np.stack([cols, rows], axis=-1), self.cfg.Dp)

    def tokenize(self, F: Tensor) -> Tensor:
        """Patch features (B, h, w, Dp) -> latent tokens (B, K, D)."""
        B, h, w, Dp = F.shape
        pe = ad.broadcast_to(Tensor(self.patch_positions(h, w)), (B, h, w, Dp))
        x = ad.concat([F, pe], axis=-1).reshape(B, h * w, 2 * Dp)
        return attention(self.codewords, self.key(x), self.value(x), self.cfg.num_heads, tag="tokenize")

    def __call__(self, cv: CostVolume, context: ContextFeatures) -> Tensor:
        N, H, W = cv.vol.shape[:3]
        T = self.tokenize(self.patchify(cv.maps()))
        T = T.reshape(N, H, W, self.cfg.K, self.cfg.D)
        for layer in self.layers:
            T = layer(T, context)
        return T


def encode_cost_volume(encoder: CostEncoder, cv: CostVolume, context: ContextFeatures) -> Tensor:
    return encoder(cv, context)
