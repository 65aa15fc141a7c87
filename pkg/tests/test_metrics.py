import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edsc.metrics import (
    PSNR_CAP,
    boundary_mask,
    brightness_constancy,
    evaluate,
    format_eval_line,
    ie_boundary,
    ie_occluded,
    interpolation_error,
    occlusion_mask,
    psnr,
    ssim,
)
from edsc.sampling import flow_warp


def _ssim_oracle(x, y):
    """Window-by-window SSIM with an explicitly padded image."""
    ax = np.arange(11) - 5.0
    g = np.exp(-ax**2 / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(x.shape[2]):
        xp = np.pad(x[..., ch], 5, mode="edge")
        yp = np.pad(y[..., ch], 5, mode="edge")
        H, W = x.shape[:2]
        m = np.zeros((H, W))
        for i in range(H):
            for j in range(W):
                a = xp[i : i + 11, j : j + 11]
                b = yp[i : i + 11, j : j + 11]
                mx, my = (w * a).sum(), (w * b).sum()
                vx = (w * a * a).sum() - mx * mx
                vy = (w * b * b).sum() - my * my
                cxy = (w * a * b).sum() - mx * my
                m[i, j] = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert abs(ssim(x, x) - 1.0) <= 1e-12


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(14, 13, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(_ssim_oracle(x, y), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_psnr_known_value_and_cap():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 0.5), st.floats(1e-6, 0.5))
def test_psnr_monotone_in_mse(s1, s2):
    a = np.zeros((4, 4, 3))
    p1, p2 = psnr(a, a + s1), psnr(a, a + s2)
    if s1 < s2:
        assert p1 > p2
    elif s1 > s2:
        assert p1 < p2


def test_ie_is_rmse_on_255_scale():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 8, 9, 3))
    assert interpolation_error(a, b) == pytest.approx(math.sqrt(np.mean(((a - b) * 255) ** 2)), abs=1e-10)


def test_ie_occluded_matches_mask_oracle():
    rng = np.random.default_rng(3)
    I1, I2, pred, gt = rng.uniform(size=(4, 10, 12, 3))
    flow = rng.normal(0, 1.5, (10, 12, 2))
    d = np.sqrt(((I1 - flow_warp(I2, flow)) ** 2).sum(axis=2))
    mask = d >= d.mean()
    np.testing.assert_array_equal(occlusion_mask(I1, I2, flow), mask)
    np.testing.assert_allclose(brightness_constancy(I1, I2, flow), d, atol=1e-15)
    sq = ((pred - gt) * 255) ** 2
    want = math.sqrt(sq[mask].mean())
    assert ie_occluded(pred, gt, mask) == pytest.approx(want, abs=1e-10)


def test_ie_occluded_empty_mask():
    a = np.zeros((4, 4, 3))
    with pytest.raises(ValueError, match="no occluded"):
        ie_occluded(a, a, np.zeros((4, 4), bool))


def test_ie_boundary_matches_band_oracle():
    rng = np.random.default_rng(4)
    pred, gt = rng.uniform(size=(2, 30, 25, 3))
    ys, xs = np.mgrid[0:30, 0:25]
    band = (np.minimum(xs, 24 - xs) < 10) | (np.minimum(ys, 29 - ys) < 10)
    np.testing.assert_array_equal(boundary_mask(30, 25, 10), band)
    want = math.sqrt((((pred - gt) * 255) ** 2)[band].mean())
    assert ie_boundary(pred, gt) == pytest.approx(want, abs=1e-10)


def test_ie_boundary_full_coverage_equals_ie():
    rng = np.random.default_rng(5)
    pred, gt = rng.uniform(size=(2, 12, 16, 3))
    assert ie_boundary(pred, gt, width=6) == interpolation_error(pred, gt)


def test_evaluate_line_format():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    line = format_eval_line(evaluate(a, b, np.ones((16, 16), bool)))
    keys = [tok.split("=")[0] for tok in line.split()]
    assert keys == ["psnr", "ssim", "ie", "ie_o", "ie_b"]
    assert "ie_o=nan" in format_eval_line(evaluate(a, b))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
