import subprocess
import sys

import numpy as np
import pytest

from edsc.cli import main, parse_config_text, resolve_config, UsageError
from edsc.fileio import read_image

TINY = """\
# small enough for unit tests
model.widths=8,16
model.estimator_widths=4,4,4
model.kernel_size=3
train.epochs=2
train.halve_every=1
train.batch=2
data.count=4
data.val_count=2
data.size=32
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture()
def trained(tmp_path, tiny_cfg):
    assert main(["gen-data", "--spec", str(tiny_cfg), "--out", str(tmp_path / "seq")]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "run")]) == 0
    return tmp_path


def test_config_precedence(tiny_cfg):
    cfg = resolve_config(str(tiny_cfg), ["model.kernel_size=5", "train.lr=0.01"])
    assert cfg["model.kernel_size"] == 5
    assert cfg["model.widths"] == (8, 16)
    assert cfg["train.lr"] == 0.01
    assert cfg["train.epochs"] == 2


def test_config_errors():
    with pytest.raises(UsageError, match="unknown key"):
        parse_config_text("model.bogus=1\n")
    with pytest.raises(UsageError, match="key=value"):
        parse_config_text("just words\n")
    with pytest.raises(UsageError, match="bad value"):
        parse_config_text("train.lr=fast\n")


def test_gen_data_manifest_and_force(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "seq"
    assert main(["gen-data", "--spec", str(tiny_cfg), "--out", str(out)]) == 0
    rows = (out / "manifest.csv").read_text().splitlines()[1:]
    targets = [float(r.split(",")[1]) for r in rows if r.endswith("target")]
    np.testing.assert_allclose(targets, [k / 6 for k in range(1, 6)], atol=1e-6)
    assert (out / "flow_1to2.flo").exists() and (out / "config.txt").exists()
    first = (out / "frame_003.ppm").read_bytes()
    assert main(["gen-data", "--spec", str(tiny_cfg), "--out", str(out)]) == 2
    assert main(["gen-data", "--spec", str(tiny_cfg), "--out", str(out), "--force"]) == 0
    assert (out / "frame_003.ppm").read_bytes() == first


def test_train_log_and_resolved_config(trained):
    run = trained / "run"
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,train_loss,val_psnr"
    assert [float(l.split(",")[1]) for l in log[1:]] == [1e-3, 5e-4]
    cfg = (run / "config.txt").read_text()
    assert "model.kernel_size=3\n" in cfg and f"out.dir={run}\n" in cfg
    assert (run / "model.ckpt").exists()


def test_interp_single_time_contract(trained, capsys):
    seq, run = trained / "seq", trained / "run"
    base = ["interp", "--ckpt", str(run / "model.ckpt"), "--frame1", str(seq / "frame_000.ppm"),
            "--frame2", str(seq / "frame_006.ppm"), "--out", str(trained / "pred")]
    assert main(base + ["--t", "0.3"]) == 1
    assert main(base) == 0
    img = read_image(trained / "pred" / "interp_t0.5000.ppm")
    assert img.shape == (32, 32, 3)
    assert main(base + ["--naive-rescale", "--times", "0.25,0.75"]) == 0
    assert (trained / "pred" / "interp_t0.2500.ppm").exists()


def test_interp_multi_time_emits_each_t(tmp_path, tiny_cfg):
    assert main(["gen-data", "--spec", str(tiny_cfg), "--out", str(tmp_path / "seq")]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "run"),
                 "--set", "model.multi_time=true", "--set", "train.epochs=1"]) == 0
    seq = tmp_path / "seq"
    args = ["interp", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--frame1", str(seq / "frame_000.ppm"),
            "--frame2", str(seq / "frame_006.ppm"), "--out", str(tmp_path / "pred")]
    assert main(args + ["--times", "0.1,0.3,0.9"]) == 0
    assert sorted(p.name for p in (tmp_path / "pred").iterdir()) == [
        "interp_t0.1000.ppm", "interp_t0.3000.ppm", "interp_t0.9000.ppm"]
    assert main(args) == 1
    assert main(args + ["--naive-rescale", "--t", "0.3"]) == 1


def test_eval_line(trained, capsys):
    seq = trained / "seq"
    pred = trained / "p"
    pred.mkdir()
    (pred / "frame_003.ppm").write_bytes((seq / "frame_003.ppm").read_bytes())
    capsys.readouterr()
    assert main(["eval", "--pred", str(pred), "--gt", str(seq), "--flow", str(seq / "flow_1to2.flo")]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("psnr=99.0000 ssim=1.0000 ie=0.0000 ie_o=0.0000 ie_b=0.0000")


def test_eval_missing_input_is_data_error(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path)]) == 2


def test_count_ratio(capsys):
    assert main(["count", "--res", "64x64"]) == 0
    vals = dict(tok.split("=") for tok in capsys.readouterr().out.split())
    assert float(vals["closed_form_ratio"]) == pytest.approx(1 / 3, abs=1e-6)
    assert float(vals["backbone_mac_ratio_vs_p1"]) == pytest.approx(1 / 3, abs=3e-3)
    assert int(vals["params"]) > 0
    assert main(["count", "--res", "64by64"]) == 1


def test_viz_kernels(trained, capsys):
    seq = trained / "seq"
    code = main(["viz-kernels", "--ckpt", str(trained / "run" / "model.ckpt"), "--frame1", str(seq / "frame_000.ppm"),
                 "--frame2", str(seq / "frame_006.ppm"), "--pixel", "10,12", "--out", str(trained / "viz")])
    assert code == 0
    names = sorted(p.name for p in (trained / "viz").iterdir())
    assert names == ["synthesized.ppm", "weights_frame1.ppm", "weights_frame2.ppm"]


def test_usage_errors():
    assert main([]) == 1
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 1


def test_bad_checkpoint_is_data_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    img = tmp_path / "f.ppm"
    img.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    code = main(["interp", "--ckpt", str(bad), "--frame1", str(img), "--frame2", str(img), "--out", str(tmp_path / "o")])
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code_and_checkpoint(tmp_path, tiny_cfg):
    code = main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "run"), "--set", "train.lr=1e30"])
    assert code == 3
    assert (tmp_path / "run" / "model.ckpt").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "op=edsc_forward" in out and "FAIL" not in out


def test_deterministic_reruns_bit_identical(tmp_path, tiny_cfg):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        subprocess.run([sys.executable, "-m", "edsc", "--deterministic", "train", "--config", str(tiny_cfg),
                        "--out", str(d), "--set", "train.epochs=1"], check=True, capture_output=True)
        outs.append((d / "model.ckpt").read_bytes())
    assert outs[0] == outs[1]
