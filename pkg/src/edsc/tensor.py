"""Dense rank-4 tensors with reverse-mode automatic differentiation.

Only the handful of layer operations the interpolation network needs are
provided. Every op records its inputs and a backward rule on the output
tensor; :class:`Tape` orders the recorded graph topologically and replays
the rules in reverse.

Layout is always ``(batch, channels, height, width)`` for images. Scalars
(losses) are rank-0 tensors.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces or receives NaN/Inf values."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values encountered")


class Tensor:
    """A real array plus the bookkeeping needed for backpropagation.

    Args:
        data: array-like. Integer input is promoted to float64.
        requires_grad: whether gradients should be accumulated into ``grad``.
        name: optional label, used in error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        _check_finite(arr, name or "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._inputs: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor. ``grad`` defaults to ones (scalar seed)."""
        Tape(self).backward(grad)

    # arithmetic sugar, same-shape or python scalar only
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op output, recording the graph edge when any input needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype.kind == "f" else data.astype(np.float64)
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._inputs = ()
    out._backward = None
    out._op = op
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered record of the ops reachable from ``root``.

    ``entries`` lists every non-leaf tensor that requires grad; each entry's
    inputs appear earlier in the list (or are leaves).
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.entries: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.entries.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            if node._backward is None:
                continue
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        root = self.root
        if not root.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if seed is None:
            if root.data.size != 1:
                raise ShapeError("a gradient seed is required for non-scalar outputs")
            seed = np.ones_like(root.data)
        seed = np.asarray(seed, dtype=root.dtype)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {root.shape}")

        grads: dict[int, np.ndarray] = {id(root): seed}
        tensors: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.entries):
            g = grads.get(id(node))
            if g is None:
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node._inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node._op}: backward produced {pg.shape} for input {parent.shape}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    tensors[key] = parent
        for key, g in grads.items():
            t = tensors[key]
            _check_finite(g, f"grad of {t.name or t._op or 'tensor'}")
            g = g.astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return make_result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def avg_pool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return make_result(out, (x,), backward, "avg_pool2x2")


def _upsample_last(x: np.ndarray) -> np.ndarray:
    # align_corners=False: out[2i] = .75 x[i] + .25 x[i-1], out[2i+1] = .75 x[i] + .25 x[i+1]
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    return np.stack([even, odd], axis=-1).reshape(*x.shape[:-1], 2 * x.shape[-1])


def _upsample_last_adjoint(g: np.ndarray) -> np.ndarray:
    ge, go = g[..., 0::2], g[..., 1::2]
    dx = 0.75 * (ge + go)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return dx


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centers (align_corners=False)."""
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear2x expects a rank-4 tensor")
    d = x.data
    out = _upsample_last(d)
    out = np.swapaxes(_upsample_last(np.swapaxes(out, 2, 3)), 2, 3)

    def backward(g):
        gh = np.swapaxes(_upsample_last_adjoint(np.swapaxes(g, 2, 3)), 2, 3)
        return (_upsample_last_adjoint(gh),)

    return make_result(np.ascontiguousarray(out, dtype=x.dtype), (x,), backward, "upsample_bilinear2x")


def constant_plane(like: Tensor, value) -> Tensor:
    """A (B, 1, H, W) constant tensor matching ``like``'s batch and spatial size.

    ``value`` is a scalar or one value per batch element.
    """
    B, _, H, W = like.shape
    vals = np.broadcast_to(np.asarray(value, dtype=like.dtype).reshape(-1), (B,))
    return Tensor(np.broadcast_to(vals[:, None, None, None], (B, 1, H, W)).copy())


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Return cols of shape (C, k*k, B*Ho*Wo) for a zero-padded input."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv output would be empty for input {H}x{W}, k={k}, pad={pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, k * k, B, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
            cols[:, i * k + j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C, k * k, B * Ho * Wo), Ho, Wo


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, H, W = x_shape
    dcols = dcols.reshape(C, k * k, B, Ho, Wo)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[
                :, i * k + j
            ].transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _cols_to_nchw(out: np.ndarray, B: int, Ho: int, Wo: int) -> np.ndarray:
    return np.ascontiguousarray(out.reshape(-1, B, Ho, Wo).transpose(1, 0, 2, 3))


def _nchw_to_cols(g: np.ndarray) -> np.ndarray:
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def conv2d(x: Tensor, weight: Tensor, bias_vec: Optional[Tensor] = None, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """2D cross-correlation with zero padding.

    Args:
        x: (B, Cin, H, W) input.
        weight: (Cout, Cin, k, k) filters, k odd.
        bias_vec: optional (Cout,) bias.
        stride: spatial stride.
        pad: zero padding; defaults to (k - 1) // 2.

    Returns:
        (B, Cout, floor((H + 2p - k)/s) + 1, floor((W + 2p - k)/s) + 1) tensor.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    Cout, Cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {k}x{k2}")
    if x.shape[1] != Cin:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {Cin}")
    if bias_vec is not None and bias_vec.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias_vec.shape} != ({Cout},)")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if pad is None:
        pad = (k - 1) // 2
    B = x.shape[0]
    cols, Ho, Wo = _im2col(x.data, k, stride, pad)
    cols2 = cols.reshape(Cin * k * k, -1)
    wmat = weight.data.reshape(Cout, -1)
    out = wmat @ cols2
    if bias_vec is not None:
        out += bias_vec.data[:, None]
    x_shape = x.shape

    def backward(g):
        gc = _nchw_to_cols(g)
        dw = (gc @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _col2im(wmat.T @ gc, x_shape, k, stride, pad, Ho, Wo)
        db = gc.sum(axis=1) if bias_vec is not None and bias_vec.requires_grad else None
        return (dx, dw, db)

    inputs = (x, weight) if bias_vec is None else (x, weight, bias_vec)
    return make_result(_cols_to_nchw(out, B, Ho, Wo), inputs, backward, "conv2d")


def hetconv_channels(cin: int, cout: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Channel assignment for a HetConv layer with 3x3 ratio 1/p.

    Filter ``m`` applies 3x3 kernels to ``ceil(cin/p)`` consecutive channels
    starting at ``(m * ceil(cin/p)) mod cin`` (wrapping), and 1x1 kernels to
    the remaining channels, continuing the wrap.

    Returns:
        (idx3, idx1) integer arrays of shape (cout, g) and (cout, cin - g).
    """
    if p < 1:
        raise ValueError(f"HetConv rate P must be >= 1, got {p}")
    if p > cin:
        raise ValueError(f"HetConv rate P={p} exceeds input channels {cin}")
    g = -(-cin // p)
    starts = (np.arange(cout) * g) % cin
    ar = np.arange(cin)
    order = (starts[:, None] + ar[None, :]) % cin
    return order[:, :g], order[:, g:]


def hetconv_weight_shapes(cin: int, cout: int, p: int) -> tuple[tuple, tuple]:
    g = -(-cin // p)
    return (cout, g, 3, 3), (cout, cin - g, 1, 1)


def hetconv2d(x: Tensor, weight3: Tensor, weight1: Tensor, bias_vec: Optional[Tensor], P: int) -> Tensor:
    """Heterogeneous convolution: per filter, 3x3 kernels on a 1/P share of the
    input channels and 1x1 kernels on the rest (stride 1, same size).

    Filters sharing the same 3x3 channel block are batched into one GEMM, so
    the arithmetic cost is the true HetConv cost rather than a dense 3x3 one.
    """
    if x.ndim != 4:
        raise ShapeError("hetconv2d expects a rank-4 input")
    B, Cin, H, W = x.shape
    Cout = weight3.shape[0]
    idx3, idx1 = hetconv_channels(Cin, Cout, P)
    s3, s1 = hetconv_weight_shapes(Cin, Cout, P)
    if weight3.shape != s3 or weight1.shape != s1:
        raise ShapeError(f"hetconv2d: weights {weight3.shape}/{weight1.shape}, expected {s3}/{s1} for Cin={Cin}, P={P}")
    if bias_vec is not None and bias_vec.shape != (Cout,):
        raise ShapeError(f"hetconv2d: bias shape {bias_vec.shape} != ({Cout},)")
    g = s3[1]

    cols, _, _ = _im2col(x.data, 3, 1, 1)  # (Cin, 9, N)
    center = cols[:, 4, :]
    groups: dict[int, np.ndarray] = {}
    for m, s in enumerate(idx3[:, 0]):
        groups.setdefault(int(s), []).append(m)
    groups = {s: np.asarray(ms) for s, ms in groups.items()}

    w3 = weight3.data.reshape(Cout, g * 9)
    N = cols.shape[2]
    out = np.zeros((Cout, N), dtype=x.dtype)
    for s, ms in groups.items():
        chans = idx3[ms[0]]
        out[ms] = w3[ms] @ cols[chans].reshape(g * 9, N)
    w1full = None
    if Cin - g > 0:
        w1full = np.zeros((Cout, Cin), dtype=x.dtype)
        np.put_along_axis(w1full, idx1, weight1.data[:, :, 0, 0], axis=1)
        out += w1full @ center
    if bias_vec is not None:
        out += bias_vec.data[:, None]

    def backward(g_out):
        gc = _nchw_to_cols(g_out)
        dw3 = np.zeros_like(w3) if weight3.requires_grad else None
        dcols = np.zeros_like(cols) if x.requires_grad else None
        for s, ms in groups.items():
            chans = idx3[ms[0]]
            sub_cols = cols[chans].reshape(g * 9, N)
            if dw3 is not None:
                dw3[ms] = gc[ms] @ sub_cols.T
            if dcols is not None:
                dcols[chans] += (w3[ms].T @ gc[ms]).reshape(g, 9, N)
        dw1 = None
        if w1full is not None:
            if weight1.requires_grad:
                dw1full = gc @ center.T
                dw1 = np.take_along_axis(dw1full, idx1, axis=1)[:, :, None, None]
            if dcols is not None:
                dcols[:, 4, :] += w1full.T @ gc
        elif weight1.requires_grad:
            dw1 = np.zeros(weight1.shape, dtype=weight1.dtype)
        dx = _col2im(dcols, x.shape, 3, 1, 1, H, W) if dcols is not None else None
        db = gc.sum(axis=1) if bias_vec is not None and bias_vec.requires_grad else None
        return (dx, None if dw3 is None else dw3.reshape(weight3.shape), dw1, db)

    inputs = (x, weight3, weight1) if bias_vec is None else (x, weight3, weight1, bias_vec)
    return make_result(_cols_to_nchw(out, B, H, W), inputs, backward, "hetconv2d")


def hetconv_dense_weight(weight3: np.ndarray, weight1: np.ndarray, cin: int, P: int) -> np.ndarray:
    """Equivalent dense (Cout, Cin, 3, 3) weight of a HetConv layer."""
    cout = weight3.shape[0]
    idx3, idx1 = hetconv_channels(cin, cout, P)
    dense = np.zeros((cout, cin, 3, 3), dtype=weight3.dtype)
    rows = np.arange(cout)[:, None]
    dense[rows, idx3] = weight3
    if idx1.shape[1]:
        dense[rows, idx1, 1, 1] = weight1[:, :, 0, 0]
    return dense
