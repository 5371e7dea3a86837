"""Command-line entry point: ``latentflow {train,infer,eval,gradcheck,bench,synth}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .autodiff import load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, load_config
from .data import (
    SampleSpec,
    aepe,
    f1_all,
    flow_to_image,
    generate_sample,
    read_flo,
    read_ppm,
    write_flo,
    write_ppm,
)
from .diagnostics import bench, model_gradient_check
from .model import FlowModel
from .tiling import tile_infer
from .train import TrainingDiverged, thread_limit, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("latentflow")


class UsageError(Exception):
    pass


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig(ModelConfig.toy())


def _parse_size(text: str) -> tuple:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--tile expects HxW, got {text!r}") from None


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    model = FlowModel(cfg.model)
    out = open(args.log, "w", newline="") if args.log else sys.stdout
    writer = csv.writer(out)
    writer.writerow(["step", "lr", "loss", "aepe"])
    every = max(1, cfg.train.log_every)

    def log_row(row):
        if row[0] % every == 0 or row[0] == cfg.train.steps - 1:
            writer.writerow([row[0], f"{row[1]:.6g}", f"{row[2]:.6f}", f"{row[3]:.6f}"])

    try:
        train(model, cfg.train, log_rows=log_row)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if args.log:
            out.close()
    save_checkpoint(args.out, model)
    return EXIT_OK


def _load_model(args) -> FlowModel:
    cfg = _config(args.config)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = FlowModel(cfg.model, init=False)
    with ad.precision(cfg.model.precision):
        model.load_state_dict(load_checkpoint(args.checkpoint))
    return model


def cmd_infer(args) -> int:
    model = _load_model(args)
    src, tgt = read_ppm(args.src), read_ppm(args.tgt)
    if src.shape != tgt.shape:
        raise UsageError(f"image sizes differ: {src.shape[:2]} vs {tgt.shape[:2]}")
    with thread_limit(model.cfg.deterministic):
        if args.tile:
            flow = tile_infer(model, src, tgt, _parse_size(args.tile), args.iters)
        else:
            flow = model.predict(src, tgt, args.iters)
    write_flo(args.out, flow)
    if args.viz:
        write_ppm(args.viz, flow_to_image(flow))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"not a directory: {d}")
    preds = {p.name for p in pred_dir.glob("*.flo")}
    gts = {p.name for p in gt_dir.glob("*.flo")}
    if preds != gts or not preds:
        raise UsageError(f"unmatched files: only-pred={sorted(preds - gts)} only-gt={sorted(gts - preds)}")
    writer = csv.writer(sys.stdout)
    writer.writerow(["sample_id", "aepe", "f1_all"])
    for name in sorted(preds):
        pred, gt = read_flo(pred_dir / name), read_flo(gt_dir / name)
        valid = gt.valid
        writer.writerow([Path(name).stem, f"{aepe(pred, gt, valid):.6f}",
                         f"{f1_all(pred, gt, valid, args.f1_mode):.4f}"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    report = model_gradient_check(cfg.model, size=args.size, iters=args.iters,
                                  samples_per_param=args.samples, tol=args.tol)
    if args.verbose:
        for name, err in report.per_param().items():
            print(f"{name},{err:.3e}")
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    cfg = _config(args.config)
    with thread_limit(cfg.model.deterministic):
        rows = bench(cfg.model, size=args.size, iters=args.iters)
    writer = csv.writer(sys.stdout)
    writer.writerow(["stage", "seconds", "peak_bytes"])
    for stage, dt, peak in rows:
        writer.writerow([stage, f"{dt:.6f}", peak])
    return EXIT_OK


def cmd_synth(args) -> int:
    s = generate_sample(SampleSpec(args.kind, args.seed, args.magnitude, args.height, args.width))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / f"{args.name}_src.ppm", s.src)
    write_ppm(out / f"{args.name}_tgt.ppm", s.tgt)
    write_flo(out / f"{args.name}.flo", s.gt)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic pairs and write a checkpoint")
    p.add_argument("--config", help="key=value config file (default: toy)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="CSV loss log path (default: stdout)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate flow for an image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("src")
    p.add_argument("tgt")
    p.add_argument("out", help="output .flo path")
    p.add_argument("--iters", type=int)
    p.add_argument("--tile", help="tile size HxW for four-tile inference")
    p.add_argument("--viz", help="optional colour-wheel PPM output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AEPE / F1-all for matching .flo files")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--f1-mode", choices=("and", "or"), default="and")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of the full model")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--samples", type=int, default=2, help="coordinates per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-stage timings")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic pair (PPM) and its ground truth (.flo)")
    p.add_argument("out_dir")
    p.add_argument("--name", default="pair")
    p.add_argument("--kind", choices=("affine", "smooth_random"), default="smooth_random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=4.0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        # config, checkpoint, format and shape errors all derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
