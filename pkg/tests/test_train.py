import numpy as np
import pytest

from latentflow.autodiff import AdamW, Tensor, clip_grad_norm, one_cycle_lr
from latentflow.config import ModelConfig, TrainConfig
from latentflow.data import SampleSpec, generate_sample, warp_backward
from latentflow.model import FlowModel
from latentflow.train import TrainingDiverged, augment, evaluate, make_dataset, train


def test_one_cycle_shape():
    total, peak = 100, 1e-3
    lrs = [one_cycle_lr(s, total, peak) for s in range(total)]
    assert lrs[0] == pytest.approx(peak / 25)
    assert max(lrs) == pytest.approx(peak) and lrs[5] == pytest.approx(peak)
    assert lrs[-1] == pytest.approx(peak / 1e4)
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert one_cycle_lr(0, 1, peak) == peak


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.sqrt((a.grad**2).sum() + (b.grad**2).sum()) == pytest.approx(1.0, rel=1e-5)
    a.grad = np.array([0.3, 0.4])
    b.grad = None
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def test_adamw_minimizes_quadratic(f64):
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = AdamW([x], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        d = x - Tensor([1.0, 0.5])
        (d * d).sum().backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 0.5], atol=1e-3)


def test_adamw_first_step_is_lr_sized(f64):
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([x], lr=0.01, weight_decay=0.0)
    x.grad = np.array([123.0])
    opt.step()
    assert x.data[0] == pytest.approx(0.99, abs=1e-8)


@pytest.mark.parametrize("code", range(8))
def test_augment_keeps_ground_truth_exact(code):
    s = generate_sample(SampleSpec("affine", 2, 5.0))
    src, tgt, flow, valid = augment(s.src, s.tgt, s.gt.flow, s.gt.valid, code)
    warped = warp_backward(np.ascontiguousarray(tgt), np.ascontiguousarray(flow))
    assert np.abs(warped - src)[valid].max() < 1e-12
    h, w = valid.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx, ty = xs + flow[..., 0], ys + flow[..., 1]
    np.testing.assert_array_equal(valid, (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1))


def test_training_is_deterministic():
    tc = TrainConfig(steps=8, lr=1e-3, num_samples=2, batch=2, image_h=32, image_w=32, augment=True)
    cfg = ModelConfig.toy(iters_train=2, iters_eval=2)
    runs = []
    for _ in range(2):
        model = FlowModel(cfg)
        rows = train(model, tc)
        runs.append((rows, [p.data.copy() for p in model.parameters()]))
    (rows_a, w_a), (rows_b, w_b) = runs
    assert rows_a == rows_b
    assert all(np.array_equal(x, y) for x, y in zip(w_a, w_b))
    assert [r[0] for r in rows_a] == list(range(8))
    assert all(np.isfinite(r[2]) for r in rows_a)


def test_evaluate_reports_every_iteration():
    tc = TrainConfig(num_samples=2, image_h=32, image_w=32)
    model = FlowModel(ModelConfig.toy(iters_eval=3))
    out = evaluate(model, make_dataset(tc))
    assert len(out) == 2 and all(len(e) == 3 for e in out)
    # zero head: every iteration predicts zero flow
    assert all(e[0] == e[-1] for e in out)


def test_divergence_raises_with_step():
    tc = TrainConfig(steps=20, lr=1e30, clip=1e30, num_samples=1, image_h=32, image_w=32)
    model = FlowModel(ModelConfig.toy(iters_train=2, zero_init_flow_head=False))
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as exc:
        train(model, tc)
    assert exc.value.step >= 1


def test_make_dataset_seeds():
    tc = TrainConfig(num_samples=3, data_seed=5, kind="affine")
    assert [s.spec.seed for s in make_dataset(tc)] == [5, 6, 7]
    assert [s.spec.seed for s in make_dataset(tc, seed_offset=100)] == [105, 106, 107]
