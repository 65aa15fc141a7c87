"""Deformable separable synthesis of an intermediate frame.

For every output pixel, each input frame contributes an n x n patch that is
resampled at learned fractional offsets around the pixel, modulated by
per-tap masks, and weighted by a per-pixel separable kernel. A per-pixel RGB
residual is added at the end. Kernels, offsets and masks are shared across
colour channels; the residual is per channel.

Field layouts (batch ``B``, frame size ``H x W``):

    kernels  k1v, k1h, k2v, k2h   (B, n, H, W)
    offsets  off1, off2           (B, 2n^2, H, W)  all dy taps, then all dx taps
    masks    m1, m2               (B, n^2, H, W)
    residual bias                 (B, 3, H, W)

Tap ``j = a * n + b`` sits at grid offset ``(a - r, b - r)`` (row, column)
with ``r = (n - 1) // 2`` and uses kernel weight ``kv[a] * kh[b]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .sampling import bilinear_weights, flow_warp, sample_nchw, sample_nchw_backward
from .tensor import ShapeError, Tensor, make_result


@dataclass
class Fields:
    """Per-pixel quantities driving the synthesis. ``None`` masks mean 1, ``None`` bias means 0."""

    k1v: Tensor
    k1h: Tensor
    k2v: Tensor
    k2h: Tensor
    off1: Tensor
    off2: Tensor
    m1: Optional[Tensor] = None
    m2: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    @property
    def n(self) -> int:
        return self.k1v.shape[1]

    def numpy(self) -> dict:
        return {k: (None if v is None else v.data) for k, v in self.__dict__.items()}


def regular_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column offsets of the n x n taps, row-major from (-r, -r) to (r, r)."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {n}")
    r = (n - 1) // 2
    a, b = np.divmod(np.arange(n * n), n)
    return (a - r).astype(np.float64), (b - r).astype(np.float64)


def _validate(I1: Tensor, I2: Tensor, f: Fields) -> int:
    if I1.ndim != 4 or I1.shape != I2.shape:
        raise ShapeError(f"frames must share a (B, C, H, W) shape, got {I1.shape} and {I2.shape}")
    B, C, H, W = I1.shape
    n = f.n
    nn = n * n
    expect = {
        "k1v": (B, n, H, W), "k1h": (B, n, H, W), "k2v": (B, n, H, W), "k2h": (B, n, H, W),
        "off1": (B, 2 * nn, H, W), "off2": (B, 2 * nn, H, W),
        "m1": (B, nn, H, W), "m2": (B, nn, H, W), "bias": (B, C, H, W),
    }
    for name, shape in expect.items():
        t = getattr(f, name)
        if t is not None and t.shape != shape:
            raise ShapeError(f"field {name} has shape {t.shape}, expected {shape} (n={n})")
    if n % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {n}")
    return n


def _branch_forward(img, kv, kh, off, mask, gy, gx):
    B, C, H, W = img.shape
    n = kv.shape[1]
    nn = n * n
    ys = np.arange(H, dtype=img.dtype)[None, None, :, None] + gy.astype(img.dtype)[None, :, None, None] + off[:, :nn]
    xs = np.arange(W, dtype=img.dtype)[None, None, None, :] + gx.astype(img.dtype)[None, :, None, None] + off[:, nn:]
    samples, cache = sample_nchw(img, ys, xs)  # (B, C, nn, H, W)
    K = (kv[:, :, None] * kh[:, None, :]).reshape(B, nn, H, W)
    Km = K if mask is None else K * mask
    out = np.einsum("bcjhw,bjhw->bchw", samples, Km, optimize=True)
    return out, (samples, cache, K, Km)


def _branch_backward(g, img_req, kv, kh, mask, saved, need_mask):
    samples, cache, K, Km = saved
    B, n = kv.shape[:2]
    H, W = kv.shape[2:]
    dS = g[:, :, None] * Km[:, None]
    dKm = np.einsum("bchw,bcjhw->bjhw", g, samples, optimize=True)
    dK = dKm if mask is None else dKm * mask
    dmask = dKm * K if need_mask else None
    dK5 = dK.reshape(B, n, n, H, W)
    dkv = (dK5 * kh[:, None, :]).sum(axis=2)
    dkh = (dK5 * kv[:, :, None]).sum(axis=1)
    dimg, dys, dxs = sample_nchw_backward(cache, dS, need_img=img_req)
    doff = np.concatenate([dys, dxs], axis=1)
    return dimg, dkv, dkh, doff, dmask


def edsc_forward(I1: Tensor, I2: Tensor, fields: Fields) -> Tensor:
    """Synthesize the intermediate frame from two (B, 3, H, W) frames.

    ``out = sum_j K1[j] m1[j] I1(p + g_j + d1_j) + sum_j K2[j] m2[j] I2(p + g_j + d2_j) + bias``
    with bilinear sampling and replicate borders. Differentiable w.r.t. the
    frames and every field.
    """
    n = _validate(I1, I2, fields)
    gy, gx = regular_grid(n)
    f = fields
    m1 = None if f.m1 is None else f.m1.data
    m2 = None if f.m2 is None else f.m2.data
    out1, saved1 = _branch_forward(I1.data, f.k1v.data, f.k1h.data, f.off1.data, m1, gy, gx)
    out2, saved2 = _branch_forward(I2.data, f.k2v.data, f.k2h.data, f.off2.data, m2, gy, gx)
    out = out1 + out2
    if f.bias is not None:
        out = out + f.bias.data

    names = ["I1", "I2", "k1v", "k1h", "k2v", "k2h", "off1", "off2", "m1", "m2", "bias"]
    tensors = [I1, I2, f.k1v, f.k1h, f.k2v, f.k2h, f.off1, f.off2, f.m1, f.m2, f.bias]
    present = [(nm, t) for nm, t in zip(names, tensors) if t is not None]

    def backward(g):
        d1 = _branch_backward(g, I1.requires_grad, f.k1v.data, f.k1h.data, m1, saved1, f.m1 is not None)
        d2 = _branch_backward(g, I2.requires_grad, f.k2v.data, f.k2h.data, m2, saved2, f.m2 is not None)
        grads = {
            "I1": d1[0], "I2": d2[0], "k1v": d1[1], "k1h": d1[2], "k2v": d2[1], "k2h": d2[2],
            "off1": d1[3], "off2": d2[3], "m1": d1[4], "m2": d2[4], "bias": g,
        }
        return tuple(grads[nm] for nm, _ in present)

    return make_result(out.astype(I1.dtype, copy=False), [t for _, t in present], backward, "edsc")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sepconv_reference(I1, I2, k1v, k1h, k2v, k2h) -> np.ndarray:
    """Local separable adaptive convolution without offsets, masks or residual.

    Written independently of :func:`edsc_forward` (explicit replicate padding
    and shifted slices) so the two can be compared.
    """
    I1, I2 = _arr(I1), _arr(I2)
    k1v, k1h, k2v, k2h = map(_arr, (k1v, k1h, k2v, k2h))
    B, C, H, W = I1.shape
    n = k1v.shape[1]
    r = (n - 1) // 2
    out = np.zeros_like(I1)
    for img, kv, kh in ((I1, k1v, k1h), (I2, k2v, k2h)):
        padded = np.pad(img, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
        for a in range(n):
            for b in range(n):
                patch = padded[:, :, a : a + H, b : b + W]
                out += (kv[:, a] * kh[:, b])[:, None] * patch
    return out


def flow_mode(I1: np.ndarray, I2: np.ndarray, k1, k2, flow1: np.ndarray, flow2: np.ndarray) -> np.ndarray:
    """Flow-based blending ``k1 * warp(I1, flow1) + k2 * warp(I2, flow2)``.

    Frames are (H, W, C); ``k1``/``k2`` are scalars or (H, W) maps; flows are
    (H, W, 2) as (u, v).
    """
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    if k1.ndim == 2:
        k1 = k1[..., None]
    if k2.ndim == 2:
        k2 = k2[..., None]
    return k1 * flow_warp(I1, flow1) + k2 * flow_warp(I2, flow2)


def naive_time_rescale(fields: Fields, t: float) -> Fields:
    """Retarget midpoint offsets to time ``t`` by scaling them linearly.

    Frame-1 offsets are multiplied by ``t / 0.5`` and frame-2 offsets by
    ``(1 - t) / 0.5``; kernels and masks are left untouched, so occlusion
    reasoning stays tied to the midpoint.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")
    s1, s2 = t / 0.5, (1.0 - t) / 0.5
    return replace(
        fields,
        off1=Tensor(fields.off1.data * fields.off1.dtype.type(s1)),
        off2=Tensor(fields.off2.data * fields.off2.dtype.type(s2)),
    )


def effective_sampling_map(fields: Fields, pixel: tuple[int, int], batch: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Where one output pixel draws its colour from, for each input frame.

    Every tap deposits ``|K[j] * m[j]|`` bilinearly (with the same border
    clamping as sampling) at its displaced position, so the total mass of a
    map equals the sum of absolute tap weights.

    Args:
        fields: fields of a forward pass.
        pixel: ``(x, y)`` of the output pixel.
        batch: batch index.

    Returns:
        Two (H, W) weight maps, one per input frame.
    """
    n = fields.n
    H, W = fields.k1v.shape[2:]
    x, y = pixel
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"pixel {pixel} outside the {W}x{H} frame")
    gy, gx = regular_grid(n)
    nn = n * n
    maps = []
    for kv, kh, off, m in (
        (fields.k1v, fields.k1h, fields.off1, fields.m1),
        (fields.k2v, fields.k2h, fields.off2, fields.m2),
    ):
        kvp = kv.data[batch, :, y, x].astype(np.float64)
        khp = kh.data[batch, :, y, x].astype(np.float64)
        w = np.outer(kvp, khp).reshape(nn)
        if m is not None:
            w = w * m.data[batch, :, y, x]
        w = np.abs(w)
        offp = off.data[batch, :, y, x].astype(np.float64)
        bw = bilinear_weights(x + gx + offp[nn:], y + gy + offp[:nn], H, W)
        canvas = np.zeros((H, W))
        for r, c, cw in zip(bw.rows, bw.cols, bw.weights):
            np.add.at(canvas, (r, c), cw * w)
        maps.append(canvas)
    return maps[0], maps[1]


def constant_fields(B: int, H: int, W: int, n: int, dtype=np.float64, kernel_value: float = 0.0) -> Fields:
    """Zero offsets, unit masks, zero residual and constant kernels; handy for reductions."""
    nn = n * n
    kv = np.full((B, n, H, W), kernel_value, dtype=dtype)
    return Fields(
        k1v=Tensor(kv.copy()), k1h=Tensor(kv.copy()), k2v=Tensor(kv.copy()), k2h=Tensor(kv.copy()),
        off1=Tensor(np.zeros((B, 2 * nn, H, W), dtype=dtype)),
        off2=Tensor(np.zeros((B, 2 * nn, H, W), dtype=dtype)),
        m1=Tensor(np.ones((B, nn, H, W), dtype=dtype)),
        m2=Tensor(np.ones((B, nn, H, W), dtype=dtype)),
        bias=Tensor(np.zeros((B, 3, H, W), dtype=dtype)),
    )
