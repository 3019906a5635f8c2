"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
    check: Sequence[int] | None = None,
    max_coords: int | None = None,
    floor: float | None = None,
) -> float:
    """Maximum relative error between backprop and central differences.

    ``fn`` maps Tensors built from ``inputs`` to an output Tensor. The output
    is reduced to a scalar with a fixed random projection ``sum(out * w)`` so
    that every output element contributes. ``check`` selects which inputs to
    perturb (default: all); ``max_coords`` subsamples coordinates per input
    for large models.

    Coordinates whose gradient is negligible relative to the largest one are
    compared with an absolute floor (``floor``; default 1e-6 times the largest
    analytic magnitude) so that round-off on near-zero entries does not read
    as a relative failure.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    which = list(range(len(arrays))) if check is None else list(check)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(vals):
        return float(np.sum(fn(*[Tensor(v) for v in vals]).data * proj))

    errs = []
    all_a, all_n = [], []
    for k in which:
        base = arrays[k]
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_idx = rng.choice(base.size, size=max_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            orig = base[idx]
            base[idx] = orig + h
            f_plus = scalar(arrays)
            base[idx] = orig - h
            f_minus = scalar(arrays)
            base[idx] = orig
            all_n.append((f_plus - f_minus) / (2 * h))
            all_a.append(analytic[k][idx])
    a = np.asarray(all_a)
    n = np.asarray(all_n)
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = max(1e-6 * float(np.max(np.abs(a))), 1e-12)
    errs = relative_error(a, n, floor)
    return float(errs.max())
