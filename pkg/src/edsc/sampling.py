"""Bilinear sampling at fractional coordinates, backward warping, and flow files.

Coordinates are in pixels with the origin at the center of the top-left
pixel: ``x`` is the column, ``y`` the row. Samples outside the image use the
nearest border pixel (replicate padding), which keeps constant images
constant and avoids dark fringes at the frame edge.

Frames are ``(H, W, C)`` arrays; flow fields are ``(H, W, 2)`` arrays holding
``(u, v)`` = (horizontal, vertical) displacement.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import make_result

FLO_MAGIC = b"FLO1"


@dataclass
class BilinearWeights:
    """Four clamped corner indices with their interpolation weights.

    Corner order is (y0,x0), (y0,x1), (y1,x0), (y1,x1). The weights are
    computed before clamping, so they always sum to one.
    """

    rows: tuple
    cols: tuple
    weights: tuple
    frac_x: np.ndarray
    frac_y: np.ndarray


def bilinear_weights(x, y, height: int, width: int) -> BilinearWeights:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN sampling coordinate")
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = np.clip(x0f, 0, width - 1).astype(np.intp)
    x1 = np.clip(x0f + 1, 0, width - 1).astype(np.intp)
    y0 = np.clip(y0f, 0, height - 1).astype(np.intp)
    y1 = np.clip(y0f + 1, 0, height - 1).astype(np.intp)
    w = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    return BilinearWeights(rows=(y0, y0, y1, y1), cols=(x0, x1, x0, x1), weights=w, frac_x=fx, frac_y=fy)


def bilinear_sample(image: np.ndarray, x, y) -> np.ndarray:
    """Sample ``image`` (H, W) or (H, W, C) at coordinates ``(x, y)``.

    >>> bilinear_sample(np.array([[0., 1.], [2., 3.]]), 0.5, 0.5)
    array(1.5)
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("cannot sample an empty image")
    bw = bilinear_weights(x, y, image.shape[0], image.shape[1])
    out = 0.0
    for r, c, w in zip(bw.rows, bw.cols, bw.weights):
        v = image[r, c]
        out = out + (w[..., None] * v if image.ndim == 3 else w * v)
    return np.asarray(out)


def bilinear_sample_grad(image: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of :func:`bilinear_sample` w.r.t. ``x`` and ``y``.

    Piecewise linear; at exact integer coordinates the right-sided
    derivative is returned. Outside the image the border is flat, so the
    derivative along a clamped axis is zero.
    """
    image = np.asarray(image, dtype=np.float64)
    bw = bilinear_weights(x, y, image.shape[0], image.shape[1])
    v00, v01, v10, v11 = (image[r, c] for r, c in zip(bw.rows, bw.cols))
    fx, fy = bw.frac_x, bw.frac_y
    if image.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return dx, dy


def _check_flow(image: np.ndarray, flow: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if image.shape[:2] != flow.shape[:2]:
        raise ValueError(f"flow {flow.shape[:2]} and image {image.shape[:2]} sizes differ")


def flow_warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp: ``out(x, y) = image(x + u, y + v)``."""
    image = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_flow(image, flow)
    H, W = image.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return bilinear_sample(image, xs + flow[..., 0], ys + flow[..., 1])


def flow_as_conv(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warping rewritten as a per-pixel 2x2 convolution.

    Each output pixel convolves the 2x2 patch at integer offsets
    ``(floor(u) + {0,1}, floor(v) + {0,1})`` with fixed bilinear
    coefficients derived from the fractional parts of the flow. Exact
    integer flows pick the floor stencil, whose off-corner weights vanish.
    """
    image = np.asarray(image, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    _check_flow(image, flow)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    H, W, C = image.shape
    u, v = flow[..., 0], flow[..., 1]
    fu, fv = np.floor(u), np.floor(v)
    a, b = u - fu, v - fv
    stencil = {  # (dv, du) -> coefficient
        (0, 0): (1 - a) * (1 - b),
        (0, 1): a * (1 - b),
        (1, 0): (1 - a) * b,
        (1, 1): a * b,
    }
    rows = np.arange(H)[:, None] + fv.astype(np.intp)
    cols = np.arange(W)[None, :] + fu.astype(np.intp)
    out = np.zeros_like(image)
    for (dv, du), coef in stencil.items():
        patch = image[np.clip(rows + dv, 0, H - 1), np.clip(cols + du, 0, W - 1)]
        out += coef[..., None] * patch
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# batched kernels for the deformable operator


def sample_nchw(img: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample ``img`` (B, C, H, W) at per-batch coordinates ``ys, xs`` (B, *S).

    Returns:
        values of shape (B, C, *S) and a cache for :func:`sample_nchw_backward`.
    """
    B, C, H, W = img.shape
    S = ys.shape[1:]
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = (xs - x0f).astype(img.dtype)
    fy = (ys - y0f).astype(img.dtype)
    x0 = np.clip(x0f, 0, W - 1).astype(np.intp)
    x1 = np.clip(x0f + 1, 0, W - 1).astype(np.intp)
    y0 = np.clip(y0f, 0, H - 1).astype(np.intp)
    y1 = np.clip(y0f + 1, 0, H - 1).astype(np.intp)
    flat = img.reshape(B, C, H * W)
    lins = [(y0 * W + x0), (y0 * W + x1), (y1 * W + x0), (y1 * W + x1)]
    lins = [l.reshape(B, 1, -1) for l in lins]
    vals = [np.take_along_axis(flat, l, axis=2).reshape(B, C, *S) for l in lins]
    fxb = fx[:, None]
    fyb = fy[:, None]
    v00, v01, v10, v11 = vals
    top = v00 + fxb * (v01 - v00)
    bot = v10 + fxb * (v11 - v10)
    out = top + fyb * (bot - top)
    cache = (img.shape, lins, vals, fx, fy)
    return out, cache


def sample_nchw_backward(cache, dout: np.ndarray, need_img: bool = True, need_coords: bool = True):
    """Gradients of :func:`sample_nchw` w.r.t. image and coordinates."""
    (B, C, H, W), lins, vals, fx, fy = cache
    v00, v01, v10, v11 = vals
    fxb, fyb = fx[:, None], fy[:, None]
    dimg = dys = dxs = None
    if need_img:
        weights = ((1 - fyb) * (1 - fxb), (1 - fyb) * fxb, fyb * (1 - fxb), fyb * fxb)
        base = (np.arange(B * C) * (H * W)).reshape(B, C, 1)
        idx = np.concatenate([(l + base).reshape(-1) for l in lins])
        w = np.concatenate([(wk * dout).reshape(-1) for wk in weights])
        dimg = np.bincount(idx, weights=w, minlength=B * C * H * W).reshape(B, C, H, W).astype(dout.dtype)
    if need_coords:
        ddx = (1 - fyb) * (v01 - v00) + fyb * (v11 - v10)
        ddy = (1 - fxb) * (v10 - v00) + fxb * (v11 - v01)
        dxs = (ddx * dout).sum(axis=1)
        dys = (ddy * dout).sum(axis=1)
    return dimg, dys, dxs


# ---------------------------------------------------------------------------
# FLO1 flow files


def write_flo(path: Union[str, Path], flow: np.ndarray) -> None:
    """Write ``FLO1``, u32 H, u32 W, then row-major little-endian f32 (u, v)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    H, W = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<II", H, W))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: not a FLO1 flow file")
    H, W = struct.unpack("<II", raw[4:12])
    expected = 12 + H * W * 2 * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {H}x{W} flow, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(H, W, 2).astype(np.float32)


def sample_op(img, ys, xs):
    """Differentiable :func:`sample_nchw` on tensors: image (B, C, H, W),
    coordinates (B, *S)."""
    out, cache = sample_nchw(img.data, ys.data, xs.data)

    def backward(g):
        dimg, dys, dxs = sample_nchw_backward(cache, g, img.requires_grad, ys.requires_grad or xs.requires_grad)
        return (dimg, dys, dxs)

    return make_result(out, (img, ys, xs), backward, "sample")
