"""Losses, Adam, the training loop and parameter-space interpolation (DNI)."""

from __future__ import annotations

import copy
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import TrainItem
from .metrics import psnr
from .model import ModelConfig, ModelParams, forward, frames_to_tensor, tensor_to_frames
from .tensor import NonFiniteError, ShapeError, Tensor, conv2d, make_result, relu

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,train_loss,val_psnr"


# ---------------------------------------------------------------------------
# losses


def charbonnier_loss(pred: Tensor, gt, eps: float = 1e-6) -> Tensor:
    """Mean of sqrt(diff^2 + eps^2) over all pixels and channels."""
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt_t.shape:
        raise ShapeError(f"charbonnier_loss: shape mismatch {pred.shape} vs {gt_t.shape}")
    d = pred.data - gt_t.data
    r = np.sqrt(d * d + pred.dtype.type(eps * eps))
    n = d.size

    def backward(g):
        gd = g * d / r / n
        return (gd, -gd)

    return make_result(np.asarray(r.mean(dtype=np.float64), dtype=pred.dtype), (pred, gt_t), backward, "charbonnier")


def mse_loss(a: Tensor, b) -> Tensor:
    b_t = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b_t.shape:
        raise ShapeError(f"mse_loss: shape mismatch {a.shape} vs {b_t.shape}")
    d = a.data - b_t.data
    n = d.size

    def backward(g):
        gd = g * 2.0 * d / n
        return (gd, -gd)

    return make_result(np.asarray((d * d).mean(dtype=np.float64), dtype=a.dtype), (a, b_t), backward, "mse")


class FeatureExtractor:
    """Fixed random stand-in for a pretrained perceptual network.

    Four 3x3 stride-2 conv+ReLU layers with seeded Kaiming weights; the
    weights never receive gradients.
    """

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 16, 32), dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.layers = []
        cin = 3
        for c in channels:
            bound = np.sqrt(6.0 / (cin * 9))
            w = Tensor(rng.uniform(-bound, bound, size=(c, cin, 3, 3)).astype(dtype))
            b = Tensor(np.zeros(c, dtype=dtype))
            self.layers.append((w, b))
            cin = c

    def astype(self, dtype) -> "FeatureExtractor":
        other = copy.copy(self)
        other.layers = [(Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype))) for w, b in self.layers]
        return other

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ShapeError("feature extractor needs frames of at least 16x16")
        for w, b in self.layers:
            if w.dtype != x.dtype:
                w, b = Tensor(w.data.astype(x.dtype)), Tensor(b.data.astype(x.dtype))
            x = relu(conv2d(x, w, b, stride=2, pad=1))
        return x


def feature_loss(pred: Tensor, gt, extractor: FeatureExtractor) -> Tensor:
    """Mean squared distance between extracted features of ``pred`` and ``gt``."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt_t.shape:
        raise ShapeError(f"feature_loss: shape mismatch {pred.shape} vs {gt_t.shape}")
    return mse_loss(extractor(pred), extractor(gt_t))


@dataclass
class LossConfig:
    kind: str = "charbonnier"  # or "charbonnier+feature"
    epsilon: float = 1e-6
    feature_weight: float = 0.01
    extractor_seed: int = 1234

    def __post_init__(self):
        if self.kind not in ("charbonnier", "charbonnier+feature"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def make_loss(cfg: LossConfig) -> Callable[[Tensor, Tensor], Tensor]:
    if cfg.kind == "charbonnier":
        return lambda pred, gt: charbonnier_loss(pred, gt, cfg.epsilon)
    extractor = FeatureExtractor(cfg.extractor_seed)

    def loss(pred, gt):
        return charbonnier_loss(pred, gt, cfg.epsilon) + feature_loss(pred, gt, extractor) * cfg.feature_weight

    return loss


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Union[ModelParams, dict], grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place.

    ``params`` maps names to tensors (or is a :class:`ModelParams`);
    ``grads`` maps the same names to gradient arrays. Returns
    ``(params, state)``.
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if g.shape != tensors[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {tensors[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in tensors.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        state.m[name] = m
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(t.dtype)
        t.data = t.data - update
    return params, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    halve_every: int = 20
    batch: int = 4
    crop: Optional[int] = 32
    full_frame_epochs: int = 0
    flip: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: halved every ``halve_every`` epochs."""
        if self.halve_every <= 0:
            return self.lr
        return self.lr * 0.5 ** (epoch // self.halve_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float

    def line(self) -> str:
        return f"{self.epoch},{self.lr:.6g},{self.train_loss:.6f},{self.val_psnr:.4f}"


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    t_counts: Counter = field(default_factory=Counter)
    step_losses: list = field(default_factory=list)

    def text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.line() for r in self.records]) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, log: TrainLog):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


def _augment(rng: np.random.Generator, frames: list, crop: Optional[int], flip: bool) -> list:
    H, W = frames[0].shape[:2]
    if crop is not None and crop < min(H, W):
        y0 = int(rng.integers(0, H - crop + 1))
        x0 = int(rng.integers(0, W - crop + 1))
        frames = [f[y0 : y0 + crop, x0 : x0 + crop] for f in frames]
    if flip:
        if rng.random() < 0.5:
            frames = [f[:, ::-1] for f in frames]
        if rng.random() < 0.5:
            frames = [f[::-1] for f in frames]
    return [np.ascontiguousarray(f) for f in frames]


def predict(params: ModelParams, items: Sequence[TrainItem], t: Optional[float] = None, batch: int = 8) -> list:
    """Inference over a list of items; returns (H, W, 3) frames."""
    frozen = params.frozen()
    dtype = params.dtype
    outs = []
    for i in range(0, len(items), batch):
        chunk = items[i : i + batch]
        I1 = frames_to_tensor(*[it.frame1 for it in chunk], dtype=dtype)
        I2 = frames_to_tensor(*[it.frame2 for it in chunk], dtype=dtype)
        pred, _ = forward(frozen, I1, I2, t)
        outs.extend(tensor_to_frames(pred))
    return outs


def validate(params: ModelParams, items: Sequence[TrainItem]) -> float:
    """Mean PSNR over every ground-truth target of ``items`` (outputs clamped to [0, 1])."""
    if not items:
        return float("nan")
    multi = params.config.multi_time
    scores = []
    times = sorted({t for it in items for t in it.targets})
    for t in times:
        subset = [it for it in items if t in it.targets]
        if not multi and abs(t - 0.5) > 1e-9:
            continue
        preds = predict(params, subset, t if multi else None)
        scores += [psnr(np.clip(p, 0, 1), it.targets[t]) for p, it in zip(preds, subset)]
    return float(np.mean(scores))


def _diverged(epoch, exc, last_good, log, checkpoint_path):
    from .fileio import save_checkpoint

    if checkpoint_path:
        save_checkpoint(checkpoint_path, last_good)
    raise TrainingDiverged(f"epoch {epoch + 1}: {exc}", last_good, log) from exc


def train(
    params: ModelParams,
    dataset: Sequence[TrainItem],
    config: TrainConfig,
    val: Sequence[TrainItem] = (),
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> tuple[ModelParams, TrainLog]:
    """Optimise ``params`` in place on ``dataset``.

    Each epoch visits every item once in a seeded random order. Multi-time
    models draw one of each item's target times per visit; single-time
    models use the t=0.5 target. After the main epochs, ``full_frame_epochs``
    more epochs run on uncropped frames at the last learning rate.

    Raises:
        TrainingDiverged: on a non-finite loss or gradient; carries the
            parameters from the end of the last completed epoch (also written
            to ``checkpoint_path`` when given).
    """
    from .fileio import save_checkpoint

    if not dataset:
        raise ValueError("empty dataset")
    multi = params.config.multi_time
    for it in dataset:
        if not multi and 0.5 not in it.targets:
            raise ValueError("single-time training needs t=0.5 targets")
    rng = np.random.default_rng(config.seed)
    loss_fn = make_loss(config.loss)
    state = AdamState(lr=config.lr)
    log = TrainLog()
    last_good = params.copy()
    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write(LOG_HEADER + "\n")
    total_epochs = config.epochs + config.full_frame_epochs
    try:
        for epoch in range(total_epochs):
            full = epoch >= config.epochs
            state.lr = config.lr_at(min(epoch, config.epochs - 1)) if config.epochs else config.lr
            order = rng.permutation(len(dataset))
            losses = []
            for start in range(0, len(order), config.batch):
                idx = order[start : start + config.batch]
                f1, f2, gts, ts = [], [], [], []
                for i in idx:
                    it = dataset[i]
                    if multi:
                        keys = sorted(it.targets)
                        t = keys[int(rng.integers(len(keys)))]
                    else:
                        t = 0.5
                    log.t_counts[round(t, 3)] += 1
                    a, b, g = _augment(rng, [it.frame1, it.frame2, it.targets[t]], None if full else config.crop, config.flip)
                    f1.append(a), f2.append(b), gts.append(g), ts.append(t)
                dtype = params.dtype
                I1 = frames_to_tensor(*f1, dtype=dtype)
                I2 = frames_to_tensor(*f2, dtype=dtype)
                gt = frames_to_tensor(*gts, dtype=dtype)
                try:
                    pred, _ = forward(params, I1, I2, np.asarray(ts) if multi else None)
                    loss = loss_fn(pred, gt)
                    params.zero_grad()
                    loss.backward()
                    adam_step(params, {k: t.grad for k, t in params.tensors.items()}, state)
                except NonFiniteError as exc:
                    _diverged(epoch, exc, last_good, log, checkpoint_path)
                losses.append(loss.item())
                log.step_losses.append(loss.item())
            try:
                val_psnr = validate(params, val) if val else float("nan")
            except NonFiniteError as exc:
                _diverged(epoch, exc, last_good, log, checkpoint_path)
            rec = EpochRecord(epoch + 1, state.lr, float(np.mean(losses)), val_psnr)
            log.records.append(rec)
            last_good = params.copy()
            if log_file:
                log_file.write(rec.line() + "\n")
                log_file.flush()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, params)
            if on_epoch:
                on_epoch(rec)
            logger.info("epoch %d lr %.3g loss %.5f val %.2f", rec.epoch, rec.lr, rec.train_loss, rec.val_psnr)
    finally:
        if log_file:
            log_file.close()
    return params, log


# ---------------------------------------------------------------------------
# DNI


def _architecture(config: ModelConfig) -> ModelConfig:
    return replace(config, seed=0)


def dni_interpolate(a: ModelParams, b: ModelParams, alpha: float) -> ModelParams:
    """Blend two same-architecture parameter sets: (1 - alpha) * a + alpha * b."""
    if _architecture(a.config) != _architecture(b.config):
        raise ValueError(f"architectures differ: {a.config} vs {b.config}")
    if a.names() != b.names():
        raise ValueError("parameter names differ")
    out = {}
    for name in a.names():
        ta, tb = a[name], b[name]
        if ta.shape != tb.shape:
            raise ValueError(f"parameter {name}: shapes {ta.shape} and {tb.shape} differ")
        data = (1.0 - alpha) * ta.data + alpha * tb.data
        out[name] = Tensor(data.astype(ta.dtype), requires_grad=True, name=name)
    return ModelParams(a.config, out)
