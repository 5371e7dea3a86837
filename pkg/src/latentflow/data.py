"""Synthetic flow pairs, flow/image file formats, visualization and metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cost_decoder import FlowField

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    kind: str = "smooth_random"  # affine | smooth_random
    seed: int = 0
    magnitude: float = 4.0
    height: int = 64
    width: int = 64
    matrix: tuple | None = None  # explicit affine A (2x2), overrides the random draw
    offset: tuple | None = None  # explicit affine b


@dataclass
class SyntheticSample:
    src: np.ndarray
    tgt: np.ndarray
    gt: FlowField
    spec: SampleSpec


def smooth_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random texture in [0, 1]: two octaves of Gaussian-blurred noise per channel."""
    img = np.zeros((h, w, 3))
    for sigma, amp in ((1.5, 0.6), (4.0, 0.4)):
        img += amp * ndimage.gaussian_filter(rng.random((h, w, 3)), sigma=(sigma, sigma, 0), mode="wrap")
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs, ys], axis=-1)


def _scale_to(field: np.ndarray, magnitude: float) -> np.ndarray:
    peak = np.sqrt((field**2).sum(-1)).max()
    if magnitude == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (magnitude / peak)


def _affine_flow(spec: SampleSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    x = _pixel_grid(h, w)
    if spec.matrix is not None or spec.offset is not None:
        A = np.asarray(spec.matrix if spec.matrix is not None else np.eye(2), dtype=np.float64)
        b = np.asarray(spec.offset if spec.offset is not None else (0.0, 0.0), dtype=np.float64)
        return x @ A.T + b - x
    # gt(x) = A x + b - x with A near identity, scaled so the peak displacement is `magnitude`
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    M = rng.uniform(-1, 1, (2, 2))
    b = rng.uniform(-1, 1, 2)
    field = (x - c) @ M.T / (max(h, w) / 2) + b
    return _scale_to(field, spec.magnitude)


def _smooth_random_flow(spec: SampleSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-1, 1, (4, 4, 2))
    h, w = spec.height, spec.width
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    field = np.stack([ndimage.map_coordinates(coarse[..., c], [yy, xx], order=1) for c in (0, 1)], -1)
    return _scale_to(field, spec.magnitude)


def warp_backward(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """out[x] = bilinear(img, x + flow(x)); outside samples clamp to the border."""
    h, w = flow.shape[:2]
    p = _pixel_grid(h, w) + flow
    coords = [p[..., 1], p[..., 0]]
    return np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(3)], -1)


def generate_sample(spec: SampleSpec) -> SyntheticSample:
    """Deterministic synthetic pair with exact ground truth.

    The target texture is drawn first and the source is resampled from it, so that
    src(x) = tgt(x + gt(x)): every source pixel moves by gt(x) into the target.
    """
    if spec.magnitude > min(spec.height, spec.width) / 4:
        raise ValueError(f"magnitude {spec.magnitude} exceeds min(H, W)/4")
    if spec.kind not in ("affine", "smooth_random"):
        raise ValueError(f"unknown sample kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    tgt = smooth_noise(rng, spec.height, spec.width)
    flow = _affine_flow(spec, rng) if spec.kind == "affine" else _smooth_random_flow(spec, rng)
    src = warp_backward(tgt, flow)
    p = _pixel_grid(spec.height, spec.width) + flow
    valid = (p[..., 0] >= 0) & (p[..., 0] <= spec.width - 1) & (p[..., 1] >= 0) & (p[..., 1] <= spec.height - 1)
    return SyntheticSample(src, tgt, FlowField(flow, valid), spec)


# ---------------------------------------------------------------- .flo


def write_flo(path, field) -> None:
    flow = field.flow if isinstance(field, FlowField) else np.asarray(field)
    h, w = flow.shape[:2]
    data = np.ascontiguousarray(flow, dtype="<f4")
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + data.tobytes())


def read_flo(path) -> FlowField:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic}")
    if w < 0 or h < 0:
        raise FlowFormatError(f"{path}: negative size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(buf) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    flow = np.frombuffer(buf[12:], dtype="<f4").reshape(h, w, 2).copy()
    return FlowField(flow, np.all(np.abs(flow) < 1e9, axis=-1))


# ---------------------------------------------------------------- PPM


def write_ppm(path, image) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 with maxval 255 -> float image in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FlowFormatError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FlowFormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FlowFormatError(f"{path}: only maxval 255 supported")
    raw = buf[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise FlowFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------- visualization


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], -1)


def flow_to_image(field, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: hue from direction, saturation from magnitude; zero is white."""
    flow = field.flow if isinstance(field, FlowField) else np.asarray(field)
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99)) if mag.size else 0.0
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(hue))
    return np.round(rgb * 255).astype(np.uint8)


# ---------------------------------------------------------------- metrics


def _epe(pred, gt, valid):
    pred = np.asarray(pred.flow if isinstance(pred, FlowField) else pred, dtype=np.float64)
    gt = np.asarray(gt.flow if isinstance(gt, FlowField) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = np.ones(gt.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("empty valid mask")
    epe = np.sqrt(((pred - gt) ** 2).sum(-1))
    return epe[valid], np.sqrt((gt**2).sum(-1))[valid]


def aepe(pred, gt, valid=None) -> float:
    epe, _ = _epe(pred, gt, valid)
    return float(epe.mean())


def f1_all(pred, gt, valid=None, mode: str = "and") -> float:
    """Outlier percentage. ``and``: epe > 3 px and epe > 5% of |gt| (KITTI); ``or``: either."""
    epe, mag = _epe(pred, gt, valid)
    if mode == "and":
        out = (epe > 3.0) & (epe > 0.05 * mag)
    elif mode == "or":
        out = (epe > 3.0) | (epe > 0.05 * mag)
    else:
        raise ValueError(f"mode must be 'and' or 'or', got {mode!r}")
    return float(100.0 * out.mean())
