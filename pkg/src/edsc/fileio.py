"""Binary PPM images and parameter checkpoints."""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import ModelConfig, ModelParams, expected_shapes
from .tensor import Tensor

PathLike = Union[str, Path]

CKPT_MAGIC = b"EDSC"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def quantize(frame: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding half up; out-of-range values are clamped."""
    x = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_image(path: PathLike, frame: np.ndarray) -> None:
    """Write an (H, W, 3) frame as binary PPM (P6, maxval 255)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
    H, W = frame.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(quantize(frame).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path: PathLike) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float32 frame in [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if W <= 0 or H <= 0 or not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported PPM dimensions or maxval ({W}x{H}, {maxval})")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise ValueError(f"{path}: malformed PPM header")
    pos += 1
    need = W * H * 3
    data = raw[pos : pos + need]
    if len(data) < need:
        raise ValueError(f"{path}: truncated pixel data ({len(data)} of {need} bytes)")
    return (np.frombuffer(data, dtype=np.uint8).reshape(H, W, 3) / float(maxval)).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def _config_lines(config: ModelConfig) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items()).encode("utf-8")


def save_checkpoint(path: PathLike, params: ModelParams) -> None:
    """Layout (little endian): magic, u32 version, u32-length config text,
    u32 tensor count, then per tensor: u32-length name, u8 dtype tag,
    u8 rank, u32 dims, raw data."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    cfg = _config_lines(params.config)
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        data = t.data
        if data.dtype == np.float32:
            tag = 0
        elif data.dtype == np.float64:
            tag = 1
        else:
            raise CheckpointError(f"tensor {name}: unsupported dtype {data.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<BB", tag, data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += np.ascontiguousarray(data, dtype=_DTYPE_TAGS[tag]).tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: PathLike, expected_config: Optional[ModelConfig] = None) -> ModelParams:
    """Load a checkpoint, verifying every tensor shape against its config.

    Raises:
        CheckpointError: bad magic/version, truncation (naming the tensor),
            shapes inconsistent with the stored config, or a config that
            differs from ``expected_config``.
    """
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an EDSC checkpoint")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    text = r.take(r.u32("config length"), "config").decode("utf-8")
    kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    config = ModelConfig.from_dict(kv)
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected_config}")
    shapes = expected_shapes(config)
    count = r.u32("tensor count")
    tensors = {}
    for i in range(count):
        name = r.take(r.u32(f"name of tensor #{i}"), f"name of tensor #{i}").decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2, f"header of tensor {name}"))
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor {name}"))
        dt = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        buf = r.take(nbytes, f"data of tensor {name}")
        arr = np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if shapes.get(name) != tuple(dims):
            raise CheckpointError(f"{path}: tensor {name} shape {dims} inconsistent with config (expected {shapes.get(name)})")
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    missing = set(shapes) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return ModelParams(config, tensors)
