"""Synthetic motion sequences with exact intermediate frames and flow.

A scene is a smooth multi-frequency background texture (optionally
translating) with a textured square occluder moving at constant velocity,
optionally rotating. Textures are sums of sinusoids, so they can be rendered
exactly at any sub-pixel position and any time. Occluder edges are
anti-aliased by their exact pixel coverage, which makes the coverage-weighted
centroid of the square track its center exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

TARGET_TIMES = tuple(k / 6 for k in range(1, 6))
SEPTUPLET_TIMES = (0.0,) + TARGET_TIMES + (1.0,)
TRIPLET_TIMES = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class MotionSpec:
    """Everything that, together with a seed, determines a sequence.

    Velocities are displacements in pixels between the first (t=0) and the
    last (t=1) frame, given as (x, y).
    """

    size: tuple = (64, 64)
    velocity: tuple = (4.0, 0.0)
    bg_velocity: tuple = (0.0, 0.0)
    object_size: tuple = (16, 16)
    start: Optional[tuple] = None
    rotation: float = 0.0
    times: tuple = SEPTUPLET_TIMES
    divisor: int = 8
    texture_periods: tuple = (6.0, 24.0)


@dataclass
class SyntheticSequence:
    spec: MotionSpec
    seed: int
    times: tuple
    frames: list
    gt_flow_1to2: np.ndarray
    centers: list
    scene: "Scene" = field(repr=False, default=None)

    def frame_at(self, t: float) -> np.ndarray:
        for tt, f in zip(self.times, self.frames):
            if abs(tt - t) < 1e-9:
                return f
        raise KeyError(f"no frame at t={t}; available {self.times}")


class _Texture:
    def __init__(self, rng: np.random.Generator, low: float, high: float, n_waves: int = 6,
                 min_period: float = 6.0, max_period: float = 24.0):
        self.low, self.high = low, high
        periods = rng.uniform(min_period, max_period, size=(3, n_waves))
        angles = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.freq = np.stack([np.cos(angles), np.sin(angles)], axis=-1) * (2 * np.pi / periods)[..., None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        amp = rng.uniform(0.5, 1.0, size=(3, n_waves))
        self.amp = amp / amp.sum(axis=1, keepdims=True)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = x[..., None, None] * self.freq[..., 0] + y[..., None, None] * self.freq[..., 1] + self.phase
        s = (self.amp * np.cos(arg)).sum(axis=-1)  # in [-1, 1]
        return self.low + (self.high - self.low) * 0.5 * (s + 1.0)


class Scene:
    """Continuous-time renderer behind a :class:`SyntheticSequence`."""

    SUPERSAMPLE = 4

    def __init__(self, spec: MotionSpec, seed: int):
        H, W = spec.size
        oh, ow = spec.object_size
        if H % spec.divisor or W % spec.divisor:
            raise ValueError(f"frame size {H}x{W} must be divisible by {spec.divisor}")
        if oh > H or ow > W or oh <= 0 or ow <= 0:
            raise ValueError(f"occluder {oh}x{ow} does not fit in a {H}x{W} frame")
        self.spec = spec
        rng = np.random.default_rng(seed)
        lo, hi = spec.texture_periods
        self.bg = _Texture(rng, 0.05, 0.5, min_period=lo, max_period=hi)
        self.obj = _Texture(rng, 0.55, 0.95, min_period=lo, max_period=hi)
        vx, vy = spec.velocity
        if spec.start is None:
            half = 0.5 * math.hypot(oh, ow) if spec.rotation else 0.5 * max(oh, ow)
            lo_x = half - 0.5 - min(0.0, vx)
            hi_x = W - 0.5 - half - max(0.0, vx)
            lo_y = half - 0.5 - min(0.0, vy)
            hi_y = H - 0.5 - half - max(0.0, vy)
            cx = rng.uniform(lo_x, hi_x) if hi_x > lo_x else (W - 1) / 2 - vx / 2
            cy = rng.uniform(lo_y, hi_y) if hi_y > lo_y else (H - 1) / 2 - vy / 2
            self.c0 = (float(cx), float(cy))
        else:
            self.c0 = (float(spec.start[0]), float(spec.start[1]))
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        self._xs, self._ys = xs, ys

    def center(self, t: float) -> tuple:
        vx, vy = self.spec.velocity
        return (self.c0[0] + t * vx, self.c0[1] + t * vy)

    def background(self, t: float) -> np.ndarray:
        bx, by = self.spec.bg_velocity
        return self.bg(self._xs - t * bx, self._ys - t * by)

    def coverage(self, t: float) -> np.ndarray:
        oh, ow = self.spec.object_size
        cx, cy = self.center(t)
        if self.spec.rotation == 0.0:
            covx = np.clip(np.minimum(self._xs + 0.5, cx + ow / 2) - np.maximum(self._xs - 0.5, cx - ow / 2), 0, 1)
            covy = np.clip(np.minimum(self._ys + 0.5, cy + oh / 2) - np.maximum(self._ys - 0.5, cy - oh / 2), 0, 1)
            return covx * covy
        ss = self.SUPERSAMPLE
        sub = (np.arange(ss) + 0.5) / ss - 0.5
        ang = -self.spec.rotation * t
        ca, sa = math.cos(ang), math.sin(ang)
        cov = np.zeros_like(self._xs)
        for dy in sub:
            for dx in sub:
                px = self._xs + dx - cx
                py = self._ys + dy - cy
                u = ca * px - sa * py
                v = sa * px + ca * py
                cov += (np.abs(u) <= ow / 2) & (np.abs(v) <= oh / 2)
        return cov / (ss * ss)

    def object_texture(self, t: float) -> np.ndarray:
        cx, cy = self.center(t)
        ang = -self.spec.rotation * t
        ca, sa = math.cos(ang), math.sin(ang)
        px, py = self._xs - cx, self._ys - cy
        return self.obj(ca * px - sa * py, sa * px + ca * py)

    def frame(self, t: float) -> np.ndarray:
        cov = self.coverage(t)[..., None]
        return (cov * self.object_texture(t) + (1 - cov) * self.background(t)).astype(np.float32)

    def flow_1to2(self) -> np.ndarray:
        """Displacement of every t=0 pixel to its t=1 position, (u, v)."""
        H, W = self.spec.size
        flow = np.empty((H, W, 2))
        flow[..., 0], flow[..., 1] = self.spec.bg_velocity
        on_obj = self.coverage(0.0) > 0.5
        c0, c1 = self.center(0.0), self.center(1.0)
        th = self.spec.rotation
        px, py = self._xs - c0[0], self._ys - c0[1]
        nx = c1[0] + math.cos(th) * px - math.sin(th) * py
        ny = c1[1] + math.sin(th) * px + math.cos(th) * py
        flow[..., 0] = np.where(on_obj, nx - self._xs, flow[..., 0])
        flow[..., 1] = np.where(on_obj, ny - self._ys, flow[..., 1])
        return flow.astype(np.float32)


def gen_sequence(spec: MotionSpec, seed: int) -> SyntheticSequence:
    """Render the frames of ``spec.times`` plus the ground-truth flow."""
    if len(spec.times) < 3:
        raise ValueError("a sequence needs at least three frames")
    if spec.times[0] != 0.0 or spec.times[-1] != 1.0:
        raise ValueError("times must start at 0 and end at 1")
    scene = Scene(spec, seed)
    frames = [scene.frame(t) for t in spec.times]
    return SyntheticSequence(
        spec=spec, seed=seed, times=tuple(spec.times), frames=frames,
        gt_flow_1to2=scene.flow_1to2(), centers=[scene.center(t) for t in spec.times], scene=scene,
    )


def coverage_centroid(cov: np.ndarray) -> tuple:
    ys, xs = np.mgrid[0 : cov.shape[0], 0 : cov.shape[1]]
    m = cov.sum()
    return (float((cov * xs).sum() / m), float((cov * ys).sum() / m))


def object_centroid(frame: np.ndarray, background: np.ndarray, threshold: float = 0.1) -> tuple:
    """Centroid (x, y) of where ``frame`` departs from a known ``background``.

    Each pixel is weighted by how far its colour difference exceeds
    ``threshold``; small background errors therefore do not pull the estimate.
    """
    diff = np.sqrt(((np.asarray(frame, dtype=np.float64) - background) ** 2).sum(axis=-1))
    w = np.maximum(diff - threshold, 0.0)
    if w.sum() <= 0:
        raise ValueError("object not found: frame equals background everywhere")
    return coverage_centroid(w)


@dataclass
class TrainItem:
    """Two input frames and the ground truth at one or more times between them."""

    frame1: np.ndarray
    frame2: np.ndarray
    targets: dict
    flow: Optional[np.ndarray] = None
    seq: Optional[SyntheticSequence] = None


def random_spec(rng: np.random.Generator, size: int = 64, max_speed: float = 8.0, max_bg_speed: float = 0.0,
                object_size: Sequence[int] = (12, 20), times: tuple = TRIPLET_TIMES,
                texture_periods: tuple = (6.0, 24.0)) -> MotionSpec:
    speed = rng.uniform(0.3 * max_speed, max_speed)
    ang = rng.uniform(0, 2 * np.pi)
    bspeed = rng.uniform(0, max_bg_speed)
    bang = rng.uniform(0, 2 * np.pi)
    side = int(rng.integers(object_size[0], object_size[1] + 1))
    return MotionSpec(
        size=(size, size),
        velocity=(speed * math.cos(ang), speed * math.sin(ang)),
        bg_velocity=(bspeed * math.cos(bang), bspeed * math.sin(bang)),
        object_size=(side, side),
        times=times,
        texture_periods=tuple(texture_periods),
    )


def make_dataset(count: int, seed: int, size: int = 64, max_speed: float = 8.0, max_bg_speed: float = 0.0,
                 multi_time: bool = False, object_size: Sequence[int] = (12, 20),
                 texture_periods: tuple = (6.0, 24.0)) -> list:
    """A list of :class:`TrainItem`; triplets (target t=0.5) or septuplets (five targets)."""
    rng = np.random.default_rng(seed)
    times = SEPTUPLET_TIMES if multi_time else TRIPLET_TIMES
    items = []
    for i in range(count):
        spec = random_spec(rng, size, max_speed, max_bg_speed, object_size, times, texture_periods)
        seq = gen_sequence(spec, seed=int(rng.integers(2**31)))
        targets = {t: f for t, f in zip(seq.times[1:-1], seq.frames[1:-1])}
        items.append(TrainItem(seq.frames[0], seq.frames[-1], targets, seq.gt_flow_1to2, seq))
    return items
