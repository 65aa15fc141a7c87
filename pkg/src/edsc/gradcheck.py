"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor


class NondeterministicGraphError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int
    per_input: dict = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = " ".join(f"{k}={v:.2e}" for k, v in self.per_input.items())
        return f"gradcheck {status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g} checked={self.n_checked} {parts}"


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Union[Sequence[np.ndarray], Mapping[str, np.ndarray]],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_per_input: Optional[int] = 64,
    seed: int = 0,
    wrt: Optional[Sequence[Union[int, str]]] = None,
) -> GradcheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` is called with one :class:`Tensor` per input and may return a
    tensor of any shape; it is reduced to a scalar by a fixed random
    projection so that every output element contributes.

    The relative error of element ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|a|)`` where the max runs over
    every element of that input's analytic gradient; the floor keeps
    components that are negligible relative to the largest one from being
    judged on pure rounding noise.

    Args:
        fn: function of tensors.
        inputs: float64 arrays, positional or named.
        h: finite-difference step.
        tol: pass threshold on the maximum relative error.
        max_per_input: random subsample size per input (None = all elements).
        seed: RNG seed for the projection and subsampling.
        wrt: restrict checking to these input indices/names.

    Raises:
        NondeterministicGraphError: if two evaluations at the same point differ.
    """
    if isinstance(inputs, Mapping):
        names = list(inputs)
        arrays = [np.array(inputs[k], dtype=np.float64) for k in names]
    else:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        names = [str(i) for i in range(len(arrays))]
    rng = np.random.default_rng(seed)

    def evaluate(arrs, grad=False):
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        return fn(*ts), ts

    out0, _ = evaluate(arrays)
    out1, _ = evaluate(arrays)
    if not np.array_equal(out0.data, out1.data):
        raise NondeterministicGraphError("fn returned different outputs for identical inputs")
    proj = rng.standard_normal(out0.shape)

    def scalar(arrs) -> float:
        out, _ = evaluate(arrs)
        return float(np.sum(out.data * proj))

    out, ts = evaluate(arrays, grad=True)
    if not out.requires_grad:
        raise ValueError("fn output does not depend on any input")
    out.backward(proj.astype(out.dtype))

    selected = range(len(arrays)) if wrt is None else [names.index(str(w)) if not isinstance(w, int) else w for w in wrt]
    worst = 0.0
    per_input = {}
    n_checked = 0
    for i in selected:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        flat_idx = np.arange(arrays[i].size)
        if max_per_input is not None and flat_idx.size > max_per_input:
            flat_idx = rng.choice(flat_idx, size=max_per_input, replace=False)
        numeric = np.empty(len(flat_idx))
        base = arrays[i]
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, base.shape)
            orig = base[idx]
            base[idx] = orig + h
            fp = scalar(arrays)
            base[idx] = orig - h
            fm = scalar(arrays)
            base[idx] = orig
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[flat_idx]
        scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
        floor = max(1e-3 * scale, 1e-10)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        err = float(np.max(np.abs(a - numeric) / denom, initial=0.0))
        per_input[names[i]] = err
        worst = max(worst, err)
        n_checked += len(flat_idx)
    return GradcheckReport(max_rel_error=worst, tol=tol, passed=worst <= tol, n_checked=n_checked, per_input=per_input)
