"""End-to-end flow model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .config import ModelConfig
from .cost_decoder import CostDecoder, FlowField
from .cost_encoder import CostEncoder
from .cost_volume import build_cost_volume
from .encoders import ContextEncoder, FeatureEncoder, as_image_batch


class FlowModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, init: bool = True):
        cfg = (cfg or ModelConfig.toy()).validate()
        self.cfg = cfg
        self.fnet = FeatureEncoder(cfg)
        self.cnet = ContextEncoder(cfg)
        self.cost_encoder = CostEncoder(cfg)
        self.decoder = CostDecoder(cfg)
        if init:
            with ad.precision(cfg.precision):
                self.init_parameters(cfg.seed)

    def encode_features(self, image):
        return self.fnet(image)

    def encode_context(self, image):
        return self.cnet(image)

    def forward(self, src, tgt, iters: int | None = None, cache_kv: bool | None = None,
                return_intermediates: bool = False):
        """Return the list of per-iteration fine flows, each (N, H_I, W_I, 2)."""
        iters = self.cfg.iters_train if iters is None else iters
        f1 = self.fnet(src)
        f2 = self.fnet(tgt)
        if f1.grid.shape != f2.grid.shape:
            raise ad.ShapeError("forward", f1.source_size, f2.source_size, "image sizes differ")
        ctx = self.cnet(src)
        cv = build_cost_volume(f1, f2)
        memory = self.cost_encoder(cv, ctx)
        preds = self.decoder(memory, cv, ctx, iters, cache_kv=cache_kv)
        if return_intermediates:
            return preds, {"cost_volume": cv, "memory": memory, "context": ctx, "features": (f1, f2),
                           "state": self.decoder.last_state}
        return preds

    __call__ = forward

    def predict(self, src, tgt, iters: int | None = None, all_iters: bool = False):
        """Inference on arbitrary-size pairs: pad (edge-replicate) to a multiple of
        8 * window, run the model, crop the flow back. Returns numpy arrays."""
        iters = self.cfg.iters_eval if iters is None else iters
        s = np.asarray(src.data if isinstance(src, Tensor) else src, dtype=np.float64)
        t = np.asarray(tgt.data if isinstance(tgt, Tensor) else tgt, dtype=np.float64)
        single = s.ndim == 3
        if single:
            s, t = s[None], t[None]
        if s.shape != t.shape:
            raise ad.ShapeError("predict", s.shape, t.shape, "image sizes differ")
        H, W = s.shape[1:3]
        m = 8 * self.cfg.window
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            widths = ((0, 0), (0, ph), (0, pw), (0, 0))
            s, t = np.pad(s, widths, mode="edge"), np.pad(t, widths, mode="edge")
        with ad.precision(self.cfg.precision), ad.no_grad():
            self.cast()
            preds = self.forward(as_image_batch(s), as_image_batch(t), iters)
        out = [p.data[:, :H, :W].astype(np.float64) for p in preds]
        if single:
            out = [o[0] for o in out]
        return out if all_iters else out[-1]

    def predict_field(self, src, tgt, iters: int | None = None) -> FlowField:
        return FlowField.dense(self.predict(src, tgt, iters))
