import csv
import io

import numpy as np
import pytest

from latentflow.autodiff import load_checkpoint, save_checkpoint
from latentflow.cli import main
from latentflow.config import load_config
from latentflow.data import SampleSpec, generate_sample, read_flo, write_flo, write_ppm
from latentflow.model import FlowModel
from latentflow.tiling import tile_infer

SMALL = """
image_h = 32
image_w = 32
iters_train = 2
iters_eval = 3
zero_init_flow_head = false
log_every = 1
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    s = generate_sample(SampleSpec("smooth_random", 7, 3.0, 48, 40))
    write_ppm(tmp_path / "src.ppm", s.src)
    write_ppm(tmp_path / "tgt.ppm", s.tgt)
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_zero_step_train_writes_initialization(workdir, capsys):
    ckpt = workdir / "init.ffck"
    code, out, _ = run(capsys, "train", "--config", workdir / "small.cfg", "--out", ckpt, "--steps", 0)
    assert code == 0
    assert rows(out) == [["step", "lr", "loss", "aepe"]]
    model = FlowModel(load_config(workdir / "small.cfg").model)
    saved = load_checkpoint(ckpt)
    for name, p in model.named_parameters():
        assert saved[name].tobytes() == p.data.astype(np.float32).tobytes(), name


def test_train_logs_csv(workdir, capsys):
    log = workdir / "loss.csv"
    code, _, _ = run(capsys, "train", "--config", workdir / "small.cfg", "--out", workdir / "m.ffck",
                     "--steps", 3, "--log", log)
    assert code == 0
    table = rows(log.read_text())
    assert table[0] == ["step", "lr", "loss", "aepe"] and [r[0] for r in table[1:]] == ["0", "1", "2"]
    assert all(float(r[2]) > 0 for r in table[1:])


def test_divergence_exits_two(workdir, capsys):
    cfg = workdir / "bad.cfg"
    cfg.write_text(SMALL + "lr = 1e30\nclip = 1e30\n")
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--config", cfg, "--out", workdir / "x.ffck", "--steps", 20)
    assert code == 2 and "non-finite loss at step" in err


def _trained(workdir, capsys):
    ckpt = workdir / "m.ffck"
    if not ckpt.exists():
        assert run(capsys, "train", "--config", workdir / "small.cfg", "--out", ckpt, "--steps", 2)[0] == 0
    return ckpt


def test_infer_writes_flow_and_viz(workdir, capsys):
    ckpt = _trained(workdir, capsys)
    out, viz = workdir / "out.flo", workdir / "out.ppm"
    code, _, _ = run(capsys, "infer", "--checkpoint", ckpt, "--config", workdir / "small.cfg",
                     workdir / "src.ppm", workdir / "tgt.ppm", out, "--viz", viz)
    assert code == 0
    flow = read_flo(out).flow
    assert flow.shape == (48, 40, 2) and np.all(np.isfinite(flow))
    assert viz.read_bytes().startswith(b"P6\n40 48\n255\n")


def test_infer_tile_equal_to_size_matches_plain(workdir, capsys):
    ckpt = _trained(workdir, capsys)
    common = ["--checkpoint", ckpt, "--config", workdir / "small.cfg", workdir / "src.ppm", workdir / "tgt.ppm"]
    assert run(capsys, "infer", *common, workdir / "a.flo")[0] == 0
    assert run(capsys, "infer", *common, workdir / "b.flo", "--tile", "48x40")[0] == 0
    a, b = read_flo(workdir / "a.flo").flow, read_flo(workdir / "b.flo").flow
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_infer_tiled_matches_library(workdir, capsys):
    ckpt = _trained(workdir, capsys)
    code, _, _ = run(capsys, "infer", "--checkpoint", ckpt, "--config", workdir / "small.cfg",
                     workdir / "src.ppm", workdir / "tgt.ppm", workdir / "t.flo", "--tile", "32x32")
    assert code == 0
    model = FlowModel(load_config(workdir / "small.cfg").model, init=False)
    model.load_state_dict(load_checkpoint(ckpt))
    from latentflow.data import read_ppm

    ref = tile_infer(model, read_ppm(workdir / "src.ppm"), read_ppm(workdir / "tgt.ppm"), (32, 32))
    np.testing.assert_allclose(read_flo(workdir / "t.flo").flow, ref, atol=1e-6)


@pytest.mark.parametrize(
    "extra,match",
    [(["--tile", "8x8"], "cannot cover"), (["--tile", "64x64"], "smaller"), (["--tile", "big"], "HxW")],
)
def test_infer_bad_tile(workdir, capsys, extra, match):
    ckpt = _trained(workdir, capsys)
    code, _, err = run(capsys, "infer", "--checkpoint", ckpt, "--config", workdir / "small.cfg",
                       workdir / "src.ppm", workdir / "tgt.ppm", workdir / "o.flo", *extra)
    assert code == 2 and match in err


def test_infer_usage_errors(workdir, capsys):
    ckpt = _trained(workdir, capsys)
    code, _, err = run(capsys, "infer", "--checkpoint", workdir / "nope.ffck",
                       workdir / "src.ppm", workdir / "tgt.ppm", workdir / "o.flo")
    assert code == 2 and "checkpoint not found" in err
    write_ppm(workdir / "small.ppm", np.zeros((32, 40, 3)))
    code, _, err = run(capsys, "infer", "--checkpoint", ckpt, "--config", workdir / "small.cfg",
                       workdir / "src.ppm", workdir / "small.ppm", workdir / "o.flo")
    assert code == 2 and "sizes differ" in err
    (workdir / "junk.ffck").write_bytes(b"nope")
    code, _, _ = run(capsys, "infer", "--checkpoint", workdir / "junk.ffck",
                     workdir / "src.ppm", workdir / "tgt.ppm", workdir / "o.flo")
    assert code == 2
    # missing config file
    code, _, err = run(capsys, "infer", "--checkpoint", ckpt, "--config", workdir / "missing.cfg",
                       workdir / "src.ppm", workdir / "tgt.ppm", workdir / "o.flo")
    assert code == 2
    assert run(capsys, "infer", "--bogus")[0] == 2


def test_checkpoint_architecture_mismatch(workdir, capsys):
    model = FlowModel(load_config(workdir / "small.cfg").model)
    save_checkpoint(workdir / "k.ffck", model)
    (workdir / "k2.cfg").write_text(SMALL + "K = 2\nD = 64\n")
    code, _, err = run(capsys, "infer", "--checkpoint", workdir / "k.ffck", "--config", workdir / "k2.cfg",
                       workdir / "src.ppm", workdir / "tgt.ppm", workdir / "o.flo")
    assert code == 2 and err.startswith("error:")


def test_eval(workdir, capsys):
    gt, pred = workdir / "gt", workdir / "pred"
    gt.mkdir(), pred.mkdir()
    rng = np.random.default_rng(0)
    for name in ("a", "b"):
        f = rng.normal(size=(6, 5, 2))
        write_flo(gt / f"{name}.flo", f)
        write_flo(pred / f"{name}.flo", f)
    code, out, _ = run(capsys, "eval", pred, gt)
    assert code == 0
    assert rows(out) == [["sample_id", "aepe", "f1_all"], ["a", "0.000000", "0.0000"], ["b", "0.000000", "0.0000"]]

    write_flo(pred / "a.flo", np.full((6, 5, 2), 100.0))
    code, out, _ = run(capsys, "eval", pred, gt, "--f1-mode", "or")
    assert code == 0 and rows(out)[1][2] == "100.0000"

    write_flo(pred / "c.flo", np.zeros((6, 5, 2)))
    code, _, err = run(capsys, "eval", pred, gt)
    assert code == 2 and "unmatched" in err
    assert run(capsys, "eval", pred, workdir / "absent")[0] == 2


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--samples", 1, "--verbose")
    assert code == 0
    assert "PASS" in out and "codewords" in out


def test_bench_rows(capsys):
    code, out, _ = run(capsys, "bench", "--size", 32, "--iters", 2)
    assert code == 0
    table = rows(out)
    assert table[0] == ["stage", "seconds", "peak_bytes"]
    stages = [r[0] for r in table[1:]]
    assert len(stages) == len(set(stages)) >= 3
    assert {"build_cost_volume", "decode"} <= set(stages)
    assert all(float(r[1]) > 0 and int(r[2]) >= 0 for r in table[1:])


def test_synth(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", tmp_path / "s", "--kind", "affine", "--seed", 3, "--height", 32, "--width", 48)
    assert code == 0
    assert read_flo(tmp_path / "s" / "pair.flo").flow.shape == (32, 48, 2)
    assert (tmp_path / "s" / "pair_src.ppm").exists() and (tmp_path / "s" / "pair_tgt.ppm").exists()


def test_no_command_is_usage_error(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "--help")[0] == 0
