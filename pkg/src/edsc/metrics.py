"""Frame quality metrics: PSNR, SSIM, interpolation error and its occluded /
boundary variants. Frames are (H, W, C) arrays with values in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .sampling import flow_warp

PSNR_CAP = 99.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """10 log10(peak^2 / MSE), capped at ``cap`` dB (identical images hit the cap)."""
    pred, gt = _pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(peak * peak / mse), cap)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03,
             window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM of two 2D images, Gaussian-weighted, replicate borders."""
    w = gaussian_window(window, sigma)
    f = lambda a: ndimage.correlate(a, w, mode="nearest")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03),
    computed per colour channel and averaged."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 11 or pred.shape[1] < 11:
        raise ValueError(f"SSIM needs images of at least 11x11, got {pred.shape[:2]}")
    if pred.ndim == 2:
        return float(ssim_map(pred, gt, data_range).mean())
    return float(np.mean([ssim_map(pred[..., c], gt[..., c], data_range).mean() for c in range(pred.shape[2])]))


def _rmse255(pred, gt, mask=None) -> float:
    d = (pred - gt) * 255.0
    sq = d * d
    if mask is not None:
        sq = sq[mask]
    return float(math.sqrt(sq.mean()))


def interpolation_error(pred, gt) -> float:
    """Root-mean-squared difference on the 0-255 scale."""
    pred, gt = _pair(pred, gt)
    return _rmse255(pred, gt)


def brightness_constancy(I1, I2, flow_1to2) -> np.ndarray:
    """Per-pixel colour distance between I1 and I2 backward-warped by the flow."""
    I1 = np.asarray(I1, dtype=np.float64)
    warped = flow_warp(I2, flow_1to2)
    return np.sqrt(((I1 - warped) ** 2).sum(axis=-1))


def occlusion_mask(I1, I2, flow_1to2) -> np.ndarray:
    """Pixels whose brightness-constancy residual is at least its mean."""
    d = brightness_constancy(I1, I2, flow_1to2)
    return d >= d.mean()


def ie_occluded(pred, gt, mask) -> float:
    pred, gt = _pair(pred, gt)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match frame {pred.shape[:2]}")
    if not mask.any():
        raise ValueError("no occluded pixels")
    return _rmse255(pred, gt, mask)


def boundary_mask(height: int, width: int, band: int = 10) -> np.ndarray:
    """Pixels closer than ``band`` to any frame edge."""
    ys, xs = np.mgrid[0:height, 0:width]
    return (xs < band) | (xs >= width - band) | (ys < band) | (ys >= height - band)


def ie_boundary(pred, gt, width: int = 10) -> float:
    pred, gt = _pair(pred, gt)
    mask = boundary_mask(pred.shape[0], pred.shape[1], width)
    return _rmse255(pred, gt, mask)


def evaluate(pred, gt, mask=None) -> dict:
    out = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt), "ie": interpolation_error(pred, gt)}
    if mask is not None:
        out["ie_o"] = ie_occluded(pred, gt, mask)
    out["ie_b"] = ie_boundary(pred, gt)
    return out


def format_eval_line(values: dict) -> str:
    keys = ["psnr", "ssim", "ie", "ie_o", "ie_b"]
    return " ".join(f"{k}={values[k]:.4f}" if k in values else f"{k}=nan" for k in keys)
