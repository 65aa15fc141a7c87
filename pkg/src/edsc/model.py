"""The interpolation network: HetConv U-Net plus per-component estimators.

The encoder-decoder consumes the two frames stacked along channels and
returns features at half resolution. Parallel estimator heads (three 3x3
conv+ReLU layers, bilinear x2 upsampling, a final 3x3 conv) turn those
features into the separable kernels, offsets, masks and RGB residual used by
:func:`edsc.deformable.edsc_forward`.

With ``multi_time`` enabled, every frame-1 head also receives a constant
plane holding ``t`` and every frame-2 head one holding ``1 - t``. The
residual head only sees the features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields as dc_fields
from typing import Optional

import numpy as np

from .deformable import Fields, edsc_forward, naive_time_rescale
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2x2,
    concat_channels,
    constant_plane,
    conv2d,
    hetconv2d,
    hetconv_weight_shapes,
    relu,
    sigmoid,
    upsample_bilinear2x,
)

MIDPOINT = 0.5


@dataclass(frozen=True)
class ModelConfig:
    kernel_size: int = 5
    hetconv_p: int = 4
    widths: tuple = (16, 32, 64, 128)
    convs_per_level: int = 2
    estimator_widths: tuple = (16, 16, 16)
    multi_time: bool = False
    use_mask: bool = True
    use_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "estimator_widths", tuple(int(w) for w in self.estimator_widths))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.hetconv_p < 1:
            raise ValueError("hetconv_p must be >= 1")
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"need at least two positive encoder widths, got {self.widths}")
        if len(self.estimator_widths) != 3 or any(w <= 0 for w in self.estimator_widths):
            raise ValueError(f"estimator_widths must be three positive ints, got {self.estimator_widths}")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """SepConv-sized backbone; used for parameter/FLOP accounting only."""
        base = dict(widths=(32, 64, 128, 256, 512), convs_per_level=3, estimator_widths=(32, 32, 32))
        base.update(overrides)
        return cls(**base)

    @property
    def depth(self) -> int:
        """Number of 2x downsamplings in the encoder."""
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[f"model.{k}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in dc_fields(cls):
            key = f"model.{f.name}"
            if key not in d:
                continue
            raw = d[key]
            if f.name in ("widths", "estimator_widths"):
                kwargs[f.name] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            elif f.name in ("multi_time", "use_mask", "use_bias"):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class LayerSpec:
    name: str
    kind: str  # "het" or "conv"
    cin: int
    cout: int
    scale: int  # output resolution divisor
    p: int = 1

    def weight_shapes(self) -> dict:
        if self.kind == "het":
            s3, s1 = hetconv_weight_shapes(self.cin, self.cout, self.p)
            return {"w3": s3, "w1": s1, "b": (self.cout,)}
        return {"w": (self.cout, self.cin, 3, 3), "b": (self.cout,)}

    def macs(self, H: int, W: int) -> int:
        pixels = (H // self.scale) * (W // self.scale)
        if self.kind == "het":
            g = -(-self.cin // self.p)
            return pixels * self.cout * (9 * g + (self.cin - g))
        return pixels * self.cout * self.cin * 9


def head_names(config: ModelConfig) -> list[str]:
    names = ["k1v", "k1h", "k2v", "k2h", "o1y", "o1x", "o2y", "o2x"]
    if config.use_mask:
        names += ["m1", "m2"]
    if config.use_bias:
        names.append("b")
    return names


def _head_out(config: ModelConfig, head: str) -> int:
    n = config.kernel_size
    if head.startswith("k"):
        return n
    if head == "b":
        return 3
    return n * n


def _head_time(head: str) -> Optional[int]:
    """Which frame's time plane a head receives (1 -> t, 2 -> 1 - t, None -> none)."""
    if head == "b":
        return None
    return int(head[1])


def layer_specs(config: ModelConfig) -> list[LayerSpec]:
    """Every convolution in the network, in forward order."""
    specs = []
    w = config.widths
    P = config.hetconv_p
    cin = 6
    for i, width in enumerate(w):
        for j in range(config.convs_per_level):
            specs.append(LayerSpec(f"enc{i}.{j}", "het", cin, width, 2 ** i, min(P, cin)))
            cin = width
    for i in range(len(w) - 2, 0, -1):
        cin = cin + w[i]
        for j in range(config.convs_per_level):
            specs.append(LayerSpec(f"dec{i}.{j}", "het", cin, w[i], 2 ** i, min(P, cin)))
            cin = w[i]
    feat = w[1]
    ew = config.estimator_widths
    for h in head_names(config):
        c = feat + (1 if config.multi_time and _head_time(h) is not None else 0)
        for j, width in enumerate(ew):
            specs.append(LayerSpec(f"{h}.{j}", "conv", c, width, 2))
            c = width
        specs.append(LayerSpec(f"{h}.out", "conv", c, _head_out(config, h), 1))
    return specs


@dataclass
class ModelParams:
    """Ordered named parameter tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def frozen(self) -> "ModelParams":
        """A view whose tensors do not record gradients (shares the arrays)."""
        return ModelParams(self.config, {k: Tensor(t.data, requires_grad=False, name=k) for k, t in self.tensors.items()})


def expected_shapes(config: ModelConfig) -> dict:
    shapes = {}
    for spec in layer_specs(config):
        for suffix, shape in spec.weight_shapes().items():
            shapes[f"{spec.name}.{suffix}"] = tuple(shape)
    return shapes


def build_model(config: ModelConfig, seed: Optional[int] = None, dtype=np.float32) -> ModelParams:
    """Deterministically initialise all parameters.

    Conv weights are Kaiming-uniform over the fan-in; biases start at zero.
    The final layers of the estimator heads are scaled down by 10 so the
    first forward pass stays close to the overlay of the two frames: zero
    offsets (their final layer is all zeros), masks near 0.5, and 1D kernels
    whose output bias is a centered unit impulse scaled so the two branches
    sum to one.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.kernel_size
    mask0 = 0.5 if config.use_mask else 1.0
    center = 1.0 / math.sqrt(2.0 * mask0)
    tensors = {}
    for spec in layer_specs(config):
        shapes = spec.weight_shapes()
        head = spec.name.split(".")[0]
        is_out = spec.name.endswith(".out")
        for suffix, shape in shapes.items():
            name = f"{spec.name}.{suffix}"
            if suffix == "b":
                data = np.zeros(shape)
                if is_out and head.startswith("k"):
                    data[n // 2] = center
            elif is_out and head.startswith("o"):
                data = np.zeros(shape)
            else:
                if spec.kind == "het":
                    g = shapes["w3"][1]
                    fan_in = 9 * g + (spec.cin - g)
                else:
                    fan_in = spec.cin * 9
                bound = math.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
                if is_out:
                    data *= 0.1
            tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


def count_params(params_or_config) -> int:
    if isinstance(params_or_config, ModelParams):
        return int(sum(t.data.size for t in params_or_config.tensors.values()))
    return int(sum(int(np.prod(s)) for s in expected_shapes(params_or_config).values()))


def count_macs(config: ModelConfig, H: int, W: int, part: Optional[str] = None) -> int:
    """Multiply-accumulates of all conv layers at an H x W input.

    ``part`` restricts the count to ``"backbone"`` (encoder-decoder) or
    ``"estimators"``.
    """
    total = 0
    for spec in layer_specs(config):
        backbone = spec.name.startswith(("enc", "dec"))
        if part == "backbone" and not backbone or part == "estimators" and backbone:
            continue
        total += spec.macs(H, W)
    return total


def count_flops(config: ModelConfig, H: int, W: int, part: Optional[str] = None) -> int:
    """FLOPs counted as 2 x MACs of the convolutions (pooling, upsampling,
    activations and the final synthesis are excluded)."""
    return 2 * count_macs(config, H, W, part)


def _het(params: ModelParams, name: str, x: Tensor, p: int) -> Tensor:
    return hetconv2d(x, params[f"{name}.w3"], params[f"{name}.w1"], params[f"{name}.b"], p)


def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def _check_time(config: ModelConfig, t: Optional[float]) -> None:
    if config.multi_time:
        if t is None:
            raise ValueError("multi-time model requires a time step t")
        tt = np.asarray(t, dtype=np.float64)
        if not np.all((tt > 0.0) & (tt < 1.0)):
            raise ValueError(f"t must lie in (0, 1), got {t}")
    elif t is not None:
        raise ValueError("single-time model synthesizes the midpoint only; do not pass t")


def features(params: ModelParams, I1: Tensor, I2: Tensor) -> Tensor:
    """Run the encoder-decoder; returns features at half resolution."""
    config = params.config
    specs = {s.name: s for s in layer_specs(config)}
    B, C, H, W = I1.shape
    div = 2 ** config.depth
    if H % div or W % div:
        raise ShapeError(f"frame size {H}x{W} must be divisible by {div}")
    if C != 3 or I2.shape != I1.shape:
        raise ShapeError(f"expected two (B, 3, H, W) frames, got {I1.shape} and {I2.shape}")
    x = concat_channels(I1, I2)
    skips = []
    for i in range(len(config.widths)):
        if i:
            x = avg_pool2x2(x)
        for j in range(config.convs_per_level):
            name = f"enc{i}.{j}"
            x = relu(_het(params, name, x, specs[name].p))
        skips.append(x)
    for i in range(len(config.widths) - 2, 0, -1):
        x = concat_channels(upsample_bilinear2x(x), skips[i])
        for j in range(config.convs_per_level):
            name = f"dec{i}.{j}"
            x = relu(_het(params, name, x, specs[name].p))
    return x


def estimate_fields(params: ModelParams, feat: Tensor, t: Optional[float] = None) -> Fields:
    config = params.config
    n2 = config.kernel_size ** 2
    tt = MIDPOINT if t is None else np.asarray(t, dtype=np.float64)
    planes = {}
    if config.multi_time:
        planes = {1: constant_plane(feat, tt), 2: constant_plane(feat, 1.0 - tt)}
    outs = {}
    for h in head_names(config):
        which = _head_time(h)
        x = concat_channels(feat, planes[which]) if planes and which is not None else feat
        for j in range(3):
            x = relu(_conv(params, f"{h}.{j}", x))
        x = _conv(params, f"{h}.out", upsample_bilinear2x(x))
        outs[h] = sigmoid(x) if h.startswith("m") else x
    off1 = concat_channels(outs["o1y"], outs["o1x"])
    off2 = concat_channels(outs["o2y"], outs["o2x"])
    assert off1.shape[1] == 2 * n2
    return Fields(
        k1v=outs["k1v"], k1h=outs["k1h"], k2v=outs["k2v"], k2h=outs["k2h"],
        off1=off1, off2=off2,
        m1=outs.get("m1"), m2=outs.get("m2"), bias=outs.get("b"),
    )


def forward(params: ModelParams, I1: Tensor, I2: Tensor, t=None) -> tuple[Tensor, Fields]:
    """Interpolate between two (B, 3, H, W) frames.

    ``t`` (multi-time models only) is a scalar or one time step per batch
    element. Returns the synthesized frame and the estimated fields.
    """
    _check_time(params.config, t)
    feat = features(params, I1, I2)
    f = estimate_fields(params, feat, t)
    return edsc_forward(I1, I2, f), f


def frames_to_tensor(*frames: np.ndarray, dtype=np.float32) -> Tensor:
    """Stack (H, W, 3) frames into a (B, 3, H, W) tensor."""
    return Tensor(np.stack([np.asarray(f).transpose(2, 0, 1) for f in frames]).astype(dtype))


def tensor_to_frames(x) -> list[np.ndarray]:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return [d.transpose(1, 2, 0) for d in data]


def interpolate(params: ModelParams, frame1: np.ndarray, frame2: np.ndarray, t: Optional[float] = None) -> np.ndarray:
    """Convenience wrapper: (H, W, 3) frames in, (H, W, 3) frame out (unclamped)."""
    dtype = params.dtype
    out, _ = forward(params, frames_to_tensor(frame1, dtype=dtype), frames_to_tensor(frame2, dtype=dtype), t)
    return tensor_to_frames(out)[0]


def interpolate_naive_rescale(params: ModelParams, frame1: np.ndarray, frame2: np.ndarray, t: float) -> np.ndarray:
    """Arbitrary-time baseline for a midpoint model: its offsets scaled linearly to ``t``."""
    if params.config.multi_time:
        raise ValueError("the offset-rescale baseline applies to single-time models")
    dtype = params.dtype
    I1, I2 = frames_to_tensor(frame1, dtype=dtype), frames_to_tensor(frame2, dtype=dtype)
    f = estimate_fields(params.frozen(), features(params.frozen(), I1, I2))
    return tensor_to_frames(edsc_forward(I1, I2, naive_time_rescale(f, t)))[0]
