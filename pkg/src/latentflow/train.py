"""Desk-scale training on synthetic pairs."""

from __future__ import annotations

import contextlib
import logging
import os

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, clip_grad_norm, one_cycle_lr
from .config import RunConfig, TrainConfig
from .cost_decoder import NonFiniteFlowError, sequence_loss
from .data import SampleSpec, aepe, generate_sample
from .model import FlowModel

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


@contextlib.contextmanager
def thread_limit(deterministic: bool = True):
    """Cap BLAS threads: one in deterministic mode, else ``FF_THREADS`` if set."""
    from threadpoolctl import threadpool_limits

    env = os.environ.get("FF_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    with threadpool_limits(limits=limit):
        yield


def make_dataset(tc: TrainConfig, seed_offset: int = 0) -> list:
    return [
        generate_sample(SampleSpec(tc.kind, tc.data_seed + seed_offset + i, tc.magnitude, tc.image_h, tc.image_w))
        for i in range(tc.num_samples)
    ]


def augment(src, tgt, flow, valid, code: int):
    """One of the 8 flips/transposes of the pixel grid; ``code`` bits pick
    (transpose, flip rows, flip columns). The flow is transformed with the grid."""
    if code & 1 and src.shape[0] == src.shape[1]:
        src, tgt, valid = src.transpose(1, 0, 2), tgt.transpose(1, 0, 2), valid.T
        flow = flow.transpose(1, 0, 2)[..., ::-1]
    if code & 2:
        src, tgt, flow, valid = src[::-1], tgt[::-1], flow[::-1] * (1, -1), valid[::-1]
    if code & 4:
        src, tgt, flow, valid = src[:, ::-1], tgt[:, ::-1], flow[:, ::-1] * (-1, 1), valid[:, ::-1]
    return src, tgt, flow, valid


def _stack(samples, codes=None):
    items = [(s.src, s.tgt, s.gt.flow, s.gt.valid) for s in samples]
    if codes is not None:
        items = [augment(*item, code) for item, code in zip(items, codes)]
    return tuple(np.stack(parts) for parts in zip(*items))


def train(model: FlowModel, tc: TrainConfig, samples=None, log_rows=None, callback=None) -> list:
    """Run ``tc.steps`` AdamW steps with a one-cycle schedule.

    Returns per-step ``(step, lr, loss, aepe)`` rows; ``log_rows`` (a callable) receives
    each row as it is produced.
    """
    cfg = model.cfg
    samples = make_dataset(tc) if samples is None else samples
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    rows = []
    order = np.array([], dtype=int)
    with ad.precision(cfg.precision), thread_limit(cfg.deterministic):
        model.cast()
        for step in range(tc.steps):
            if len(order) < tc.batch:
                order = np.concatenate([order, rng.permutation(len(samples))])
            idx, order = order[: tc.batch], order[tc.batch :]
            codes = rng.integers(0, 8, len(idx)) if tc.augment else None
            src, tgt, gt, valid = _stack([samples[i] for i in idx], codes)
            lr = one_cycle_lr(step, tc.steps, tc.lr)
            opt.lr = lr
            opt.zero_grad()
            try:
                preds = model(src, tgt, cfg.iters_train)
            except NonFiniteFlowError as exc:
                raise TrainingDiverged(step) from exc
            loss = sequence_loss(preds, gt, valid, cfg.gamma)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(step)
            loss.backward()
            clip_grad_norm(opt.params, tc.clip)
            opt.step()
            err = aepe(preds[-1].data, gt, valid)
            row = (step, lr, float(loss.data), err)
            rows.append(row)
            if log_rows is not None:
                log_rows(row)
            if callback is not None:
                callback(step, model)
    return rows


def evaluate(model: FlowModel, samples, iters: int | None = None) -> list:
    """Per-sample AEPE of the final prediction (and of every iteration)."""
    out = []
    with thread_limit(model.cfg.deterministic):
        for s in samples:
            flows = model.predict(s.src, s.tgt, iters, all_iters=True)
            out.append([aepe(f, s.gt.flow, s.gt.valid) for f in flows])
    return out


def run_training(cfg: RunConfig, log_rows=None) -> tuple:
    model = FlowModel(cfg.model)
    rows = train(model, cfg.train, log_rows=log_rows)
    return model, rows
