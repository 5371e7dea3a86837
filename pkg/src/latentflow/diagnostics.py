"""Gradient check of the whole model and per-stage timing."""

from __future__ import annotations

import dataclasses
import time
import tracemalloc

from . import autodiff as ad
from .config import ModelConfig
from .cost_decoder import sequence_loss
from .cost_volume import build_cost_volume
from .data import SampleSpec, generate_sample
from .model import FlowModel


def model_gradient_check(cfg: ModelConfig | None = None, size: int = 16, iters: int = 2,
                         samples_per_param: int = 2, seed: int = 0, tol: float = 1e-3,
                         eps: float = 1e-4) -> ad.GradCheckReport:
    """Finite-difference check of the sequence loss w.r.t. every parameter tensor.

    The flow head is randomly initialized so that gradients reach every parameter
    group (a zero head blocks them).
    """
    cfg = dataclasses.replace(cfg or ModelConfig.toy(), precision="f64", zero_init_flow_head=False)
    with ad.precision("f64"):
        model = FlowModel(cfg)
        s = generate_sample(SampleSpec("smooth_random", seed, min(2.0, size / 4), size, size))
        src, tgt = s.src[None], s.tgt[None]
        gt, valid = s.gt.flow[None], s.gt.valid[None]

        def loss():
            return sequence_loss(model(src, tgt, iters), gt, valid, cfg.gamma)

        return ad.gradient_check(loss, model.parameters(), eps=eps, tol=tol,
                                 samples_per_param=samples_per_param, seed=seed)


def bench(cfg: ModelConfig | None = None, size: int = 64, iters: int | None = None, repeats: int = 3) -> list:
    """Rows of (stage, seconds, peak_bytes) for cost volume, encoding and decoding."""
    cfg = cfg or ModelConfig.toy()
    iters = cfg.iters_eval if iters is None else iters
    model = FlowModel(cfg)
    s = generate_sample(SampleSpec("smooth_random", cfg.seed, min(4.0, size / 4), size, size))
    rows = {}

    def timed(stage, fn):
        tracemalloc.start()
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        best = rows.get(stage)
        rows[stage] = (min(dt, best[0]) if best else dt, max(peak, best[1]) if best else peak)
        return out

    with ad.precision(cfg.precision), ad.no_grad():
        for _ in range(repeats):
            f1 = timed("feature_encode", lambda: model.fnet(s.src))
            f2 = model.fnet(s.tgt)
            ctx = timed("context_encode", lambda: model.cnet(s.src))
            cv = timed("build_cost_volume", lambda: build_cost_volume(f1, f2))
            memory = timed("cost_encode", lambda: model.cost_encoder(cv, ctx))
            timed("decode", lambda: model.decoder(memory, cv, ctx, iters))
    return [(stage, dt, peak) for stage, (dt, peak) in rows.items()]
