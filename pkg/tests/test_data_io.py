import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edsc.data import (
    TARGET_TIMES,
    MotionSpec,
    coverage_centroid,
    gen_sequence,
    make_dataset,
    object_centroid,
)
from edsc.fileio import CheckpointError, load_checkpoint, quantize, read_image, save_checkpoint, write_image
from edsc.checks import tiny_config
from edsc.metrics import brightness_constancy, occlusion_mask
from edsc.model import build_model
from edsc.training import dni_interpolate


def test_five_target_times_present():
    seq = gen_sequence(MotionSpec(), seed=0)
    assert len(seq.frames) == 7
    np.testing.assert_allclose(seq.times[1:-1], [1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6])
    assert seq.times[1:-1] == TARGET_TIMES


def test_same_seed_same_bytes():
    a = gen_sequence(MotionSpec(rotation=0.3), seed=4)
    b = gen_sequence(MotionSpec(rotation=0.3), seed=4)
    c = gen_sequence(MotionSpec(rotation=0.3), seed=5)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
    assert a.frames[0].tobytes() != c.frames[0].tobytes()


def test_centroid_moves_half_the_velocity():
    seq = gen_sequence(MotionSpec(velocity=(4.0, 0.0)), seed=1)
    c0 = coverage_centroid(seq.scene.coverage(0.0))
    c5 = coverage_centroid(seq.scene.coverage(0.5))
    assert c5[0] - c0[0] == pytest.approx(2.0, abs=1e-9)
    assert c5[1] == pytest.approx(c0[1], abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.floats(-6, 6), st.floats(-6, 6), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_centroid_linear_in_time(vx, vy, t, seed):
    seq = gen_sequence(MotionSpec(size=(32, 32), velocity=(vx, vy), object_size=(8, 8)), seed=seed)
    c0 = np.array(coverage_centroid(seq.scene.coverage(0.0)))
    c1 = np.array(coverage_centroid(seq.scene.coverage(1.0)))
    ct = np.array(coverage_centroid(seq.scene.coverage(t)))
    np.testing.assert_allclose(ct, (1 - t) * c0 + t * c1, atol=1e-9)


def test_object_centroid_from_pixels():
    seq = gen_sequence(MotionSpec(velocity=(6.0, 2.0)), seed=2)
    bg = seq.scene.background(0.5)
    est = object_centroid(seq.frame_at(0.5), bg)
    true = seq.scene.center(0.5)
    assert abs(est[0] - true[0]) < 0.5 and abs(est[1] - true[1]) < 0.5


def test_gt_flow_on_occluder():
    spec = MotionSpec(velocity=(3.0, -2.0), bg_velocity=(1.0, 0.5))
    seq = gen_sequence(spec, seed=3)
    on = seq.scene.coverage(0.0) > 0.5
    flow = seq.gt_flow_1to2
    np.testing.assert_allclose(flow[on], np.broadcast_to([3.0, -2.0], flow[on].shape), atol=1e-5)
    np.testing.assert_allclose(flow[~on], np.broadcast_to([1.0, 0.5], flow[~on].shape), atol=1e-6)


def test_brightness_constancy_off_occlusion_band():
    spec = MotionSpec(velocity=(4.0, 0.0), bg_velocity=(0.0, 0.0))
    seq = gen_sequence(spec, seed=5)
    d = brightness_constancy(seq.frames[0], seq.frames[-1], seq.gt_flow_1to2)
    cov0, cov1 = seq.scene.coverage(0.0), seq.scene.coverage(1.0)
    away = (cov0 == 0) & (cov1 == 0)
    assert d[away].max() < 1e-6
    assert occlusion_mask(seq.frames[0], seq.frames[-1], seq.gt_flow_1to2).any()


def test_occluder_too_large():
    with pytest.raises(ValueError, match="does not fit"):
        gen_sequence(MotionSpec(size=(16, 16), object_size=(20, 4)), seed=0)


def test_size_must_be_divisible():
    with pytest.raises(ValueError, match="divisible"):
        gen_sequence(MotionSpec(size=(30, 32)), seed=0)


def test_make_dataset_targets():
    single = make_dataset(2, seed=0, size=32)
    assert list(single[0].targets) == [0.5]
    multi = make_dataset(2, seed=0, size=32, multi_time=True)
    assert tuple(multi[0].targets) == TARGET_TIMES


# ---------------------------------------------------------------------------
# PPM


def test_white_pixel_bytes(tmp_path):
    path = tmp_path / "w.ppm"
    write_image(path, np.ones((1, 1, 3)))
    assert path.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"


def test_round_half_up():
    assert quantize(np.array([0.5 / 255, 1.5 / 255, 0.49 / 255])).tolist() == [1, 2, 0]


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(5, 7, 3))
    write_image(tmp_path / "a.ppm", img)
    once = read_image(tmp_path / "a.ppm")
    assert np.abs(once - img).max() <= 0.5 / 255 + 1e-7
    write_image(tmp_path / "b.ppm", once)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert np.array_equal(read_image(tmp_path / "b.ppm"), once)


def test_ppm_with_comment(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 0, 0, 255, 255, 255]))
    img = read_image(path)
    assert img.shape == (1, 2, 3)
    assert img[0, 1, 0] == 1.0


@pytest.mark.parametrize(
    "raw,match",
    [
        (b"P5\n1 1\n255\n\x00", "not a binary PPM"),
        (b"P6\n1 x\n255\n\x00\x00\x00", "malformed"),
        (b"P6\n2 2\n255\n\x00\x00\x00", "truncated"),
        (b"P6\n1", "malformed"),
    ],
)
def test_ppm_errors(tmp_path, raw, match):
    path = tmp_path / "bad.ppm"
    path.write_bytes(raw)
    with pytest.raises(ValueError, match=match):
        read_image(path)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    for dtype in (np.float32, np.float64):
        p = build_model(tiny_config(seed=3), dtype=dtype)
        save_checkpoint(tmp_path / "m.ckpt", p)
        q = load_checkpoint(tmp_path / "m.ckpt")
        assert q.config == p.config
        assert q.names() == p.names()
        assert all(q[n].data.tobytes() == p[n].data.tobytes() and q[n].dtype == dtype for n in p.names())
        save_checkpoint(tmp_path / "m2.ckpt", q)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", build_model(tiny_config()))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"EDSC"
    assert int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    text = raw[12 : 12 + n].decode()
    assert "model.kernel_size=3\n" in text


def test_checkpoint_truncation_names_tensor(tmp_path):
    p = build_model(tiny_config())
    save_checkpoint(tmp_path / "m.ckpt", p)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match=p.names()[-1]):
        load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_bad_magic_and_version(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", build_model(tiny_config()))
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    (tmp_path / "a.ckpt").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "a.ckpt")
    raw[4] = 7
    (tmp_path / "b.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "b.ckpt")


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", build_model(tiny_config()))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(tmp_path / "m.ckpt", expected_config=tiny_config(kernel_size=5))


def test_cross_run_dni_requires_same_shapes(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", build_model(tiny_config(seed=1)))
    save_checkpoint(tmp_path / "b.ckpt", build_model(tiny_config(seed=2)))
    save_checkpoint(tmp_path / "c.ckpt", build_model(tiny_config(kernel_size=5)))
    a, b, c = (load_checkpoint(tmp_path / f"{k}.ckpt") for k in "abc")
    mid = dni_interpolate(a, b, 0.5)
    assert np.allclose(mid[a.names()[0]].data, 0.5 * (a[a.names()[0]].data + b[a.names()[0]].data))
    with pytest.raises(ValueError):
        dni_interpolate(a, c, 0.5)
