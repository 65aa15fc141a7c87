"""Slow, independent reference implementations used only by the tests."""

import math

import numpy as np


def bilinear_scalar(img, y, x):
    """One bilinear sample of img[c, h, w] at (y, x) with clamped corners."""
    C, H, W = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    out = np.zeros(C)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            r = min(max(y0 + dy, 0), H - 1)
            c = min(max(x0 + dx, 0), W - 1)
            out += wy * wx * img[:, r, c]
    return out


def edsc_bruteforce(I1, I2, k1v, k1h, k2v, k2h, off1, off2, m1=None, m2=None, bias=None):
    """Per-pixel loop that materializes each deformed n x n patch, then
    applies the separable kernel and masks."""
    B, C, H, W = I1.shape
    n = k1v.shape[1]
    r = (n - 1) // 2
    nn = n * n
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for y in range(H):
            for x in range(W):
                acc = np.zeros(C)
                for img, kv, kh, off, m in ((I1, k1v, k1h, off1, m1), (I2, k2v, k2h, off2, m2)):
                    patch = np.zeros((n, n, C))
                    for a in range(n):
                        for c in range(n):
                            j = a * n + c
                            sy = y + (a - r) + off[b, j, y, x]
                            sx = x + (c - r) + off[b, nn + j, y, x]
                            patch[a, c] = bilinear_scalar(img[b], sy, sx)
                            if m is not None:
                                patch[a, c] *= m[b, j, y, x]
                    K = np.outer(kv[b, :, y, x], kh[b, :, y, x])
                    acc += np.einsum("ac,acd->d", K, patch)
                if bias is not None:
                    acc += bias[b, :, y, x]
                out[b, :, y, x] = acc
    return out


def conv2d_loop(x, w, b=None, stride=1, pad=1):
    """Direct cross-correlation with zero padding."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("bckl,ockl->bo", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out
