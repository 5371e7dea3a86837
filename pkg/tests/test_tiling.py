import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentflow.config import ModelConfig
from latentflow.model import FlowModel
from latentflow.tiling import SIGMA, blend_tiles, gaussian_weight, plan_tiles, tile_infer, weight_map


def test_center_weight_is_one():
    assert gaussian_weight(10, 16, (20, 32)) == 1.0


def test_one_sigma_weight():
    # u / H - 0.5 = 0.05 = sigma
    assert abs(gaussian_weight(11, 10, (20, 20)) - math.exp(-0.5)) <= 1e-12


def test_corner_weight():
    assert gaussian_weight(0, 0, (64, 64)) == pytest.approx(math.exp(-100.0), rel=1e-12)


def test_floor_keeps_weights_positive():
    assert gaussian_weight(0, 0, (64, 64), sigma=0.001) == 1e-300
    w = weight_map((64, 48), sigma=0.001)
    assert np.all(w > 0)


def test_weight_map_matches_scalar_and_peaks_at_centre():
    w = weight_map((24, 40))
    assert w.dtype == np.float64
    for u, v in [(0, 0), (5, 17), (12, 20), (23, 39)]:
        assert w[u, v] == pytest.approx(gaussian_weight(u, v, (24, 40)), rel=1e-14)
    assert np.unravel_index(np.argmax(w), w.shape) == (12, 20)


@pytest.mark.parametrize("size", [(16, 24), (64, 64), (8, 40)])
def test_weight_symmetry(size):
    H, W = size
    for u in range(1, H):
        for v in range(1, W, 3):
            assert gaussian_weight(u, v, size) == pytest.approx(gaussian_weight(H - u, W - v, size), abs=1e-12)


def test_plan_origins_and_errors():
    plan = plan_tiles((100, 150), (64, 96))
    assert sorted(plan.origins) == [(0, 0), (0, 54), (36, 0), (36, 54)]
    assert plan.weight_map.shape == (64, 96)
    assert plan_tiles((64, 64), (64, 64)).origins == [(0, 0)] * 4
    with pytest.raises(ValueError, match="single-pass"):
        plan_tiles((60, 100), (64, 64))
    assert plan_tiles((128, 64), (64, 64)).origins[3] == (64, 0)
    with pytest.raises(ValueError, match="cannot cover"):
        plan_tiles((129, 64), (64, 64))


@given(st.integers(8, 40), st.integers(8, 40), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=40, deadline=None)
def test_every_pixel_covered(hr, wr, fh, fw):
    dh, dw = int(fh * hr), int(fw * wr)
    plan = plan_tiles((hr + dh, wr + dw), (hr, wr))
    cover = np.zeros(plan.test_size, dtype=int)
    for r, c in plan.origins:
        cover[r : r + hr, c : c + wr] += 1
    assert cover.min() >= 1


@given(st.integers(0, 2**32 - 1), st.integers(0, 16), st.integers(0, 24))
@settings(max_examples=30, deadline=None)
def test_blend_lies_in_envelope(seed, dh, dw):
    rng = np.random.default_rng(seed)
    hr, wr = 16, 24
    plan = plan_tiles((hr + dh, wr + dw), (hr, wr))
    tiles = [rng.normal(scale=10, size=(hr, wr, 2)) for _ in range(4)]
    out = blend_tiles(plan, tiles)
    lo = np.full(out.shape, np.inf)
    hi = np.full(out.shape, -np.inf)
    for (r, c), f in zip(plan.origins, tiles):
        lo[r : r + hr, c : c + wr] = np.minimum(lo[r : r + hr, c : c + wr], f)
        hi[r : r + hr, c : c + wr] = np.maximum(hi[r : r + hr, c : c + wr], f)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


def test_constant_tiles_blend_to_constant():
    plan = plan_tiles((90, 70), (64, 64))
    out = blend_tiles(plan, [np.full((64, 64, 2), (1.5, -2.0))] * 4)
    np.testing.assert_allclose(out, np.broadcast_to([1.5, -2.0], out.shape), rtol=1e-12)


def test_equal_weight_overlap_averages():
    # two tiles covering one pixel at mirrored positions have equal weights
    plan = plan_tiles((16, 24), (16, 16))
    a, b = np.zeros((16, 16, 2)), np.ones((16, 16, 2)) * 4
    # column 12 is v=12 in the left tile and v=4 in the right one: mirror pair about 8
    out = blend_tiles(plan, [a, b, a, b])
    w_left, w_right = plan.weight_map[8, 12], plan.weight_map[8, 4]
    assert w_left == pytest.approx(w_right, rel=1e-12)
    np.testing.assert_allclose(out[8, 12], [2.0, 2.0], rtol=1e-12)


def test_far_corner_blend_stays_finite():
    # a pixel seen only at tile corners still gets a finite value thanks to the floor
    plan = plan_tiles((64, 64), (64, 64))
    plan.weight_map[:] = 1e-300
    out = blend_tiles(plan, [np.ones((64, 64, 2))] * 4)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, 1.0)


def test_tile_shape_check():
    plan = plan_tiles((32, 32), (16, 16))
    with pytest.raises(ValueError, match="tile flow shape"):
        blend_tiles(plan, [np.zeros((16, 15, 2))] * 4)


def test_degenerate_tiling_equals_single_pass(rng):
    model = FlowModel(ModelConfig.toy(zero_init_flow_head=False))
    src, tgt = rng.random((64, 64, 3)), rng.random((64, 64, 3))
    single = model.predict(src, tgt, iters=3)
    tiled = tile_infer(model, src, tgt, (64, 64), iters=3)
    assert np.abs(single).max() > 0
    np.testing.assert_allclose(tiled, single, atol=1e-6, rtol=0)


def test_tile_infer_larger_image(rng):
    model = FlowModel(ModelConfig.toy(zero_init_flow_head=False))
    src, tgt = rng.random((80, 96, 3)), rng.random((80, 96, 3))
    out = tile_infer(model, src, tgt, (64, 64), iters=2)
    assert out.shape == (80, 96, 2) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        tile_infer(model, src, tgt[:, :90], (64, 64))


def test_sigma_constant():
    assert SIGMA == 0.05
