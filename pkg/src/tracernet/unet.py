"""Modified U-net: configurable depth and width, variable input channels.

Parameter names follow ``level{i}.{down|up|bottleneck}.{layer}.{kind}`` plus
``final.conv.{weight|bias}`` for the 1×1 output head. Batch-norm running
statistics live in the same store (``run_mean``/``run_var``) so that a
checkpoint captures everything needed for eval-mode inference.
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import (
    BadMagicError,
    ConfigError,
    CorruptCheckpointError,
    ShapeError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv1x1,
    conv3x3,
    maxpool2x2,
    relu,
    upconv2x2,
)

CKPT_MAGIC = b"GLCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    out_channels: int = 2
    base_features: int = 64
    depth: int = 4
    seed: int = 0
    max_width: int = 1024

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "base_features", "depth", "max_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"UNetConfig.{name} must be a positive integer")
        if self.base_features * 2**self.depth > self.max_width:
            raise ConfigError(
                f"bottleneck width {self.base_features * 2**self.depth} exceeds max_width {self.max_width}"
            )

    def widths(self) -> list[int]:
        """Channel width per level, index ``depth`` being the bottleneck."""
        return [self.base_features * 2**i for i in range(self.depth + 1)]

    def check_extent(self, h: int, w: int) -> None:
        step = 2**self.depth
        if h % step or w % step:
            raise ConfigError(f"spatial extent {h}×{w} is not divisible by 2**depth = {step}")


def _param_shapes(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def double_conv(prefix: str, c_in: int, c_out: int):
        shapes.extend([
            (f"{prefix}.conv1.weight", (c_out, c_in, 3, 3)),
            (f"{prefix}.conv1.bias", (c_out,)),
            (f"{prefix}.bn1.gamma", (c_out,)),
            (f"{prefix}.bn1.beta", (c_out,)),
            (f"{prefix}.bn1.run_mean", (c_out,)),
            (f"{prefix}.bn1.run_var", (c_out,)),
            (f"{prefix}.conv2.weight", (c_out, c_out, 3, 3)),
            (f"{prefix}.conv2.bias", (c_out,)),
            (f"{prefix}.bn2.gamma", (c_out,)),
            (f"{prefix}.bn2.beta", (c_out,)),
            (f"{prefix}.bn2.run_mean", (c_out,)),
            (f"{prefix}.bn2.run_var", (c_out,)),
        ])

    widths = cfg.widths()
    c_in = cfg.in_channels
    for i in range(cfg.depth):
        double_conv(f"level{i}.down", c_in, widths[i])
        c_in = widths[i]
    double_conv(f"level{cfg.depth}.bottleneck", widths[cfg.depth - 1], widths[cfg.depth])
    for i in reversed(range(cfg.depth)):
        shapes.append((f"level{i}.up.upconv.weight", (widths[i + 1], widths[i], 2, 2)))
        shapes.append((f"level{i}.up.upconv.bias", (widths[i],)))
        double_conv(f"level{i}.up", 2 * widths[i], widths[i])
    shapes.append(("final.conv.weight", (cfg.out_channels, widths[0], 1, 1)))
    shapes.append(("final.conv.bias", (cfg.out_channels,)))
    return shapes


def _is_buffer(name: str) -> bool:
    return name.endswith(".run_mean") or name.endswith(".run_var")


class UNet:
    """Weight store plus wiring for the encoder-decoder network."""

    def __init__(self, config: UNetConfig, store: "OrderedDict[str, Tensor]"):
        self.config = config
        self.store = store

    @property
    def parameters(self) -> list[Tensor]:
        """Trainable tensors in store order (running statistics excluded)."""
        return [t for n, t in self.store.items() if not _is_buffer(n)]

    @property
    def parameter_names(self) -> list[str]:
        return [n for n in self.store if not _is_buffer(n)]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters)

    @property
    def dtype(self):
        return next(iter(self.store.values())).dtype

    def zero_grad(self) -> None:
        for t in self.store.values():
            t.grad = None

    def _bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self.store[f"{prefix}.run_mean"].data, self.store[f"{prefix}.run_var"].data)

    def _block(self, x: Tensor, prefix: str, mode: str) -> Tensor:
        s = self.store
        for k in ("1", "2"):
            x = conv3x3(x, s[f"{prefix}.conv{k}.weight"], s[f"{prefix}.conv{k}.bias"])
            x = batchnorm2d(x, s[f"{prefix}.bn{k}.gamma"], s[f"{prefix}.bn{k}.beta"],
                            self._bn_state(f"{prefix}.bn{k}"), mode)
            x = relu(x)
        return x

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return forward(self, x, mode)

    def copy(self) -> "UNet":
        store = OrderedDict((n, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n))
                            for n, t in self.store.items())
        return UNet(self.config, store)


def build_unet(config: UNetConfig, dtype=np.float32) -> UNet:
    """Allocate and initialize every tensor from ``config.seed``.

    Convolution weights are He-normal (std sqrt(2 / fan_in)); the output head
    uses std sqrt(1 / fan_in) because no activation follows it. Biases and
    batch-norm betas start at 0, gammas at 1, running variance at 1.
    """
    rng = np.random.default_rng(config.seed)
    store: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _param_shapes(config):
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            if name.startswith("final."):
                fan_in = shape[1]
                std = np.sqrt(1.0 / fan_in)
            elif ".upconv." in name:
                std = np.sqrt(2.0 / shape[0])
            else:
                std = np.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
            arr = rng.standard_normal(shape) * std
        elif kind in ("gamma", "run_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        store[name] = Tensor(arr.astype(dtype), requires_grad=not _is_buffer(name), name=name)
    return UNet(config, store)


def forward(model: UNet, batch, mode: str = "train") -> Tensor:
    """Run the network on a B×in×H×W batch.

    In eval mode batch normalization uses running statistics, so each sample's
    prediction is independent of the rest of the batch.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    cfg = model.config
    if x.data.ndim != 4:
        raise ShapeError(f"forward expects B×C×H×W input, got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} input channels, got {x.shape[1]}")
    cfg.check_extent(*x.shape[2:])

    skips = []
    for i in range(cfg.depth):
        x = model._block(x, f"level{i}.down", mode)
        skips.append(x)
        x = maxpool2x2(x)
    x = model._block(x, f"level{cfg.depth}.bottleneck", mode)
    s = model.store
    for i in reversed(range(cfg.depth)):
        x = upconv2x2(x, s[f"level{i}.up.upconv.weight"], s[f"level{i}.up.upconv.bias"])
        x = concat_channels(skips[i], x)
        x = model._block(x, f"level{i}.up", mode)
    return conv1x1(x, s["final.conv.weight"], s["final.conv.bias"])


def save_checkpoint(model: UNet, path: str | os.PathLike) -> None:
    """Write the GLCK file. Values are stored as float32."""
    cfg = model.config
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(struct.pack("<4I", cfg.in_channels, cfg.out_channels, cfg.base_features, cfg.depth))
    for name, t in model.store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        tensorio.write_tensor(buf, t.data)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, config: UNetConfig | None = None) -> UNet:
    """Read a GLCK file; if ``config`` is given every shape must match it."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fh = io.BytesIO(blob)
    if len(blob) < 6:
        raise CorruptCheckpointError("corrupt checkpoint: file too short")
    if fh.read(4) != CKPT_MAGIC:
        raise BadMagicError(f"{path} is not a GLCK checkpoint")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    head = fh.read(16)
    if len(head) != 16:
        raise CorruptCheckpointError("corrupt checkpoint: truncated config block")
    c_in, c_out, base, depth = struct.unpack("<4I", head)
    seed = config.seed if config is not None else 0
    stored_cfg = UNetConfig(c_in, c_out, base, depth, seed=seed,
                            max_width=max(config.max_width if config else 0, base * 2**depth))
    target = config if config is not None else stored_cfg
    expected = OrderedDict(_param_shapes(target))

    store: OrderedDict[str, Tensor] = OrderedDict()
    while fh.tell() < len(blob):
        lb = fh.read(2)
        if len(lb) != 2:
            raise CorruptCheckpointError("corrupt checkpoint: truncated name length")
        (n,) = struct.unpack("<H", lb)
        raw = fh.read(n)
        if len(raw) != n:
            raise CorruptCheckpointError("corrupt checkpoint: truncated name")
        name = raw.decode("utf-8")
        try:
            arr = tensorio.read_tensor(fh)
        except (BadMagicError, VersionMismatchError) as exc:
            raise CorruptCheckpointError(f"corrupt checkpoint: bad tensor record for {name}") from exc
        if name not in expected:
            raise ShapeMismatchError(f"checkpoint parameter {name} does not exist in the target config")
        if tuple(arr.shape) != tuple(expected[name]):
            raise ShapeMismatchError(f"{name}: checkpoint shape {arr.shape} != config shape {expected[name]}")
        store[name] = Tensor(arr, requires_grad=not _is_buffer(name), name=name)

    missing = [n for n in expected if n not in store]
    if missing:
        if (c_in, c_out, base, depth) != (target.in_channels, target.out_channels,
                                          target.base_features, target.depth):
            raise ShapeMismatchError(f"checkpoint config {(c_in, c_out, base, depth)} does not match target config")
        raise CorruptCheckpointError(f"corrupt checkpoint: missing {len(missing)} parameters, e.g. {missing[0]}")
    return UNet(target, OrderedDict((n, store[n]) for n in expected))
