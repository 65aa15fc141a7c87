"""Finite-difference gradient suite over every differentiable op."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .deformable import Fields, edsc_forward
from .gradcheck import GradcheckReport, gradcheck
from .model import ModelConfig, build_model, forward
from .sampling import sample_op
from .tensor import (
    Tensor,
    avg_pool2x2,
    conv2d,
    hetconv2d,
    hetconv_weight_shapes,
    relu,
    sigmoid,
    upsample_bilinear2x,
)
from .training import FeatureExtractor, charbonnier_loss, feature_loss, mse_loss


def _away_from_kinks(rng, shape, margin=0.05):
    """Values whose distance to 0 is at least ``margin`` (for relu)."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _fractional(rng, shape, scale, margin=0.1):
    """Random values at least ``margin`` away from any integer."""
    base = rng.integers(-scale, scale + 1, size=shape).astype(np.float64)
    return base + rng.uniform(margin, 1.0 - margin, size=shape)


def _edsc_inputs(rng, B=1, H=5, W=6, n=3):
    nn = n * n
    return {
        "I1": rng.uniform(0, 1, (B, 3, H, W)),
        "I2": rng.uniform(0, 1, (B, 3, H, W)),
        "k1v": rng.normal(0, 0.5, (B, n, H, W)),
        "k1h": rng.normal(0, 0.5, (B, n, H, W)),
        "k2v": rng.normal(0, 0.5, (B, n, H, W)),
        "k2h": rng.normal(0, 0.5, (B, n, H, W)),
        "off1": _fractional(rng, (B, 2 * nn, H, W), 1),
        "off2": _fractional(rng, (B, 2 * nn, H, W), 1),
        "m1": rng.uniform(0.1, 0.9, (B, nn, H, W)),
        "m2": rng.uniform(0.1, 0.9, (B, nn, H, W)),
        "bias": rng.normal(0, 0.1, (B, 3, H, W)),
    }


def _edsc_fn(I1, I2, k1v, k1h, k2v, k2h, off1, off2, m1, m2, bias):
    return edsc_forward(I1, I2, Fields(k1v, k1h, k2v, k2h, off1, off2, m1, m2, bias))


def op_cases(seed: int) -> dict[str, tuple[Callable, dict]]:
    """Named (fn, inputs) pairs for one seed; inputs avoid non-differentiable points."""
    rng = np.random.default_rng(seed)
    cin, cout, P = 8, 6, 4
    s3, s1 = hetconv_weight_shapes(cin, cout, P)
    extractor = FeatureExtractor(seed=seed).astype(np.float64)
    B, H, W = 2, 5, 7
    return {
        "conv2d": (
            lambda x, w, b: conv2d(x, w, b),
            {"x": rng.normal(size=(2, 3, 6, 5)), "w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)},
        ),
        "conv2d_stride2": (
            lambda x, w, b: conv2d(x, w, b, stride=2, pad=1),
            {"x": rng.normal(size=(1, 2, 7, 6)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)},
        ),
        "hetconv2d": (
            lambda x, w3, w1, b: hetconv2d(x, w3, w1, b, P),
            {"x": rng.normal(size=(2, cin, 5, 4)), "w3": rng.normal(size=s3), "w1": rng.normal(size=s1), "b": rng.normal(size=cout)},
        ),
        "relu": (relu, {"x": _away_from_kinks(rng, (2, 3, 4, 4))}),
        "sigmoid": (sigmoid, {"x": rng.normal(0, 2, (2, 3, 4, 4))}),
        "avg_pool2x2": (avg_pool2x2, {"x": rng.normal(size=(2, 3, 6, 4))}),
        "upsample_bilinear2x": (upsample_bilinear2x, {"x": rng.normal(size=(2, 3, 3, 4))}),
        "bilinear_sample": (
            sample_op,
            {
                "img": rng.uniform(0, 1, (B, 3, H, W)),
                "ys": rng.integers(-1, H, (B, 4, 3)) + rng.uniform(0.1, 0.9, (B, 4, 3)),
                "xs": rng.integers(-1, W, (B, 4, 3)) + rng.uniform(0.1, 0.9, (B, 4, 3)),
            },
        ),
        "edsc_forward": (_edsc_fn, _edsc_inputs(rng)),
        "charbonnier_loss": (
            lambda p, g: charbonnier_loss(p, g, eps=1e-3),
            {"p": rng.uniform(0, 1, (2, 3, 4, 4)), "g": rng.uniform(0, 1, (2, 3, 4, 4))},
        ),
        "mse_loss": (mse_loss, {"a": rng.normal(size=(2, 5)), "b": rng.normal(size=(2, 5))}),
        "feature_loss": (
            lambda p, g: feature_loss(p, g, extractor),
            {"p": rng.uniform(0, 1, (1, 3, 16, 16)), "g": rng.uniform(0, 1, (1, 3, 16, 16))},
        ),
    }


def run_op_suite(seeds=range(10), h: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, int, GradcheckReport]]:
    results = []
    for seed in seeds:
        for name, (fn, inputs) in op_cases(seed).items():
            results.append((name, seed, gradcheck(fn, inputs, h=h, tol=tol, max_per_input=24, seed=seed)))
    return results


def tiny_config(**overrides) -> ModelConfig:
    base = dict(kernel_size=3, hetconv_p=2, widths=(4, 8), convs_per_level=1, estimator_widths=(4, 4, 4))
    base.update(overrides)
    return ModelConfig(**base)


def end_to_end_check(seed: int = 0, h: float = 1e-5, tol: float = 1e-3, config: ModelConfig | None = None) -> GradcheckReport:
    """Charbonnier loss of a full forward pass on 8x8 frames, checked w.r.t. a
    sample of the parameters of every layer."""
    config = config or tiny_config(seed=seed)
    params = build_model(config, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # non-zero offset heads, with sampling positions kept away from integers
    for name in params.names():
        if name.startswith("o") and name.endswith(".out.w"):
            params[name].data = rng.normal(0, 0.02, params[name].shape)
        elif name.startswith("o") and name.endswith(".out.b"):
            params[name].data = rng.uniform(0.3, 0.7, params[name].shape)
    I1 = rng.uniform(0, 1, (1, 3, 8, 8))
    I2 = rng.uniform(0, 1, (1, 3, 8, 8))
    gt = rng.uniform(0, 1, (1, 3, 8, 8))
    names = params.names()
    picked = [n for n in names if n.endswith((".w", ".w3", ".w1")) or n.endswith("out.b")]
    t = 0.3 if config.multi_time else None

    def fn(*arrays):
        p = params.copy()
        for n, a in zip(picked, arrays):
            p.tensors[n] = a
        out, _ = forward(p, Tensor(I1), Tensor(I2), t)
        return charbonnier_loss(out, Tensor(gt), eps=1e-3)

    inputs = {n: params[n].data for n in picked}
    return gradcheck(fn, inputs, h=h, tol=tol, max_per_input=4, seed=seed)
