"""Minimal reverse-mode tensor and the seven layer primitives the U-net uses.

Every primitive takes :class:`Tensor` arguments, computes its forward value with
numpy, and attaches a closure that maps the upstream gradient to gradients for
each parent.  Calling :meth:`Tensor.backward` on a result walks the recorded
graph in reverse topological order.

Precision follows the inputs: float64 in tests (so finite-difference checks are
meaningful), float32 for training runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """Dense array with an optional gradient buffer and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an upstream gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D B×C×H×W tensor, got shape {x.shape}")


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """B×C×H×W -> B×(C·9)×(H·W) patch matrix for a padded 3×3 window."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + H, kj:kj + W]
    return cols.reshape(B, C * 9, H * W)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3×3 cross-correlation, stride 1, zero padding 1 (output keeps H×W)."""
    _check_4d(x, "conv3x3")
    B, C, H, W = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 weight must be C_out×C_in×3×3, got {weight.shape}")
    C_out = weight.shape[0]
    if weight.shape[1] != C:
        raise ShapeError(f"conv3x3 channel mismatch: input has {C}, weight expects {weight.shape[1]}")
    if bias.shape != (C_out,):
        raise ShapeError(f"conv3x3 bias must have shape ({C_out},), got {bias.shape}")

    cols = _im2col3x3(x.data)
    wmat = weight.data.reshape(C_out, C * 9)
    out = np.matmul(wmat, cols)
    out += bias.data[None, :, None]
    out = out.reshape(B, C_out, H, W)

    def backward(g):
        g3 = g.reshape(B, C_out, H * W)
        dw = db = dx = None
        if weight.requires_grad:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias.requires_grad:
            db = g3.sum(axis=(0, 2))
        if x.requires_grad:
            # gradient of a same-padded correlation is a correlation with the
            # spatially flipped, channel-transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, C_out * 9)
            dx = np.matmul(wflip, _im2col3x3(g)).reshape(B, C, H, W)
        return dx, dw, db

    return Tensor._from_op(out, (x, weight, bias), backward)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise channel mixing; used as the U-net output head."""
    _check_4d(x, "conv1x1")
    B, C, H, W = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1) or weight.shape[1] != C:
        raise ShapeError(f"conv1x1 weight {weight.shape} incompatible with input channels {C}")
    C_out = weight.shape[0]
    wmat = weight.data.reshape(C_out, C)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    out = xm @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, C_out).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, C_out)
        dw = (g2.T @ xm).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = np.ascontiguousarray((g2 @ wmat).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        return dx, dw, db

    return Tensor._from_op(out, (x, weight, bias), backward)


def upconv2x2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed convolution with a 2×2 kernel and stride 2 (doubles H and W).

    ``weight`` is laid out C_in×C_out×2×2; output pixel (2i+p, 2j+q) of channel o
    receives sum_c x[c, i, j] * weight[c, o, p, q] + bias[o].
    """
    _check_4d(x, "upconv2x2")
    B, C, H, W = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2x2 weight must be C_in×C_out×2×2, got {weight.shape}")
    if weight.shape[0] != C:
        raise ShapeError(f"upconv2x2 channel mismatch: input has {C}, weight expects {weight.shape[0]}")
    C_out = weight.shape[1]
    if bias.shape != (C_out,):
        raise ShapeError(f"upconv2x2 bias must have shape ({C_out},), got {bias.shape}")

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = weight.data.reshape(C, C_out * 4)
    y = (xm @ wmat).reshape(B, H, W, C_out, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(B, C_out, 2 * H, 2 * W)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(B, C_out, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, C_out * 4)
        dw = (xm.T @ g2).reshape(weight.shape)
        db = g.sum(axis=(0, 2, 3))
        dx = np.ascontiguousarray((g2 @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
        return dx, dw, db

    return Tensor._from_op(out, (x, weight, bias), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2×2 max pooling.

    Ties resolve to the first window position in row-major order, so the
    backward pass is deterministic.
    """
    _check_4d(x, "maxpool2x2")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {H}×{W}")
    H2, W2 = H // 2, W // 2
    windows = x.data.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    idx = windows.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        scatter = np.zeros((B, C, H2, W2, 4), dtype=g.dtype)
        np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
        dx = scatter.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (dx,)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a``'s channels before ``b``'s along axis 1."""
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching batch/spatial extents, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(out, (a, b), backward)


@dataclass
class BatchNormState:
    """Running per-channel statistics for :func:`batchnorm2d`."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes with biased batch statistics and folds the unbiased
    batch variance into the running estimate (PyTorch convention).  Eval mode
    uses the running statistics and is therefore independent per sample.
    """
    _check_4d(x, "batchnorm2d")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({C},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    g_b = gamma.data[None, :, None, None]

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = (gamma.data * inv_std).astype(x.dtype)
        shift = (beta.data - state.running_mean * gamma.data * inv_std).astype(x.dtype)
        xhat = (x.data - state.running_mean[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None].astype(x.dtype)
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

        def backward_eval(g):
            dx = g * scale[None, :, None, None]
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx, dgamma, dbeta

        return Tensor._from_op(out, (x, gamma, beta), backward_eval)

    n = B * H * W
    if n < 2:
        raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * g_b + beta.data[None, :, None, None]

    if update_stats:
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * g_b
        dx = (inv_std / n)[None, :, None, None] * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)
