"""Losses, the training loop, prediction and an sklearn-compatible wrapper."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, NonFiniteError, ShapeError
from .optim import AdamState, adam_step
from .preprocess import Dataset
from .tensor import Tensor
from .unet import UNet, UNetConfig, build_unet, forward

log = logging.getLogger(__name__)

LOSS_KINDS = ("L1", "L2")


def loss(pred: Tensor, target, kind: str = "L2") -> Tensor:
    """Mean over every element of (pred - target)**2 (L2) or |pred - target| (L1).

    The L1 subgradient at exact equality is 0.
    """
    kind = kind.upper()
    if kind not in LOSS_KINDS:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {t.shape}")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    n = diff.size
    if kind == "L2":
        value = np.mean(diff * diff, dtype=np.float64)

        def backward(g):
            return ((2.0 / n) * g * diff).astype(pred.dtype, copy=False), None
    else:
        value = np.mean(np.abs(diff), dtype=np.float64)

        def backward(g):
            return ((1.0 / n) * g * np.sign(diff)).astype(pred.dtype, copy=False), None

    tgt = target if isinstance(target, Tensor) else Tensor(t)
    return Tensor._from_op(np.asarray(value, dtype=pred.dtype), (pred, tgt), backward)


@dataclass
class TrainConfig:
    loss_kind: str = "L2"
    epochs: int = 250
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.loss_kind = self.loss_kind.upper()
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be L1 or L2, got {self.loss_kind!r}")
        for name in ("epochs", "batch_size", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")


@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)

    def append(self, epoch: int, train: float, test: float) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("loss-curve epochs must be strictly increasing")
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.test_loss.append(test)

    def rows(self) -> list[list]:
        return [[e, a, b] for e, a, b in zip(self.epochs, self.train_loss, self.test_loss)]

    def best_test_epoch(self) -> int | None:
        finite = [(v, e) for e, v in zip(self.epochs, self.test_loss) if np.isfinite(v)]
        return min(finite)[1] if finite else None

    def __len__(self):
        return len(self.epochs)


def _as_arrays(data, dtype):
    if isinstance(data, Dataset):
        return data.arrays(dtype)
    X, y = data
    return np.asarray(X, dtype=dtype), np.asarray(y, dtype=dtype)


def evaluate_loss(model: UNet, X: np.ndarray, y: np.ndarray, kind: str, batch_size: int = 8) -> float:
    """Sample-weighted mean eval-mode loss over a dataset (raw, unclamped outputs)."""
    if len(X) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(X), batch_size):
        out = forward(model, X[i:i + batch_size], "eval")
        total += float(loss(out, y[i:i + batch_size], kind).data) * len(out.data)
    return total / len(X)


def train(model: UNet, train_data, test_data=None, config: TrainConfig | None = None,
          progress: bool = False) -> tuple[UNet, LossCurve]:
    """Mini-batch Adam on ``model`` in place.

    Each epoch draws a fresh permutation from a generator seeded with
    ``config.seed``; the last partial batch is kept. Train loss per epoch is the
    sample-weighted mean of the mini-batch losses in train mode; test loss is
    an eval-mode pass over ``test_data`` every ``log_every`` epochs (and at the
    final epoch).
    """
    cfg = config or TrainConfig()
    dtype = model.dtype
    X, y = _as_arrays(train_data, dtype)
    if X.shape[1] != model.config.in_channels:
        raise ShapeError(f"dataset has {X.shape[1]} channels, model expects {model.config.in_channels}")
    Xt = yt = None
    if test_data is not None:
        Xt, yt = _as_arrays(test_data, dtype)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(learning_rate=cfg.learning_rate)
    params = model.parameters
    names = model.parameter_names
    curve = LossCurve()
    n = len(X)
    t0 = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            out = forward(model, X[idx], "train")
            value = loss(out, y[idx], cfg.loss_kind)
            lv = float(value.data)
            if not np.isfinite(lv):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            value.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            try:
                adam_step(params, grads, state, names)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from exc
            running += lv * len(idx)
        train_loss = running / n
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            test_loss = evaluate_loss(model, Xt, yt, cfg.loss_kind, cfg.batch_size) if Xt is not None else float("nan")
            curve.append(epoch, train_loss, test_loss)
            if progress:
                log.info("epoch %d train %.3e test %.3e (%.0fs)", epoch, train_loss, test_loss,
                         time.perf_counter() - t0)
    model.zero_grad()
    return model, curve


def predict(model: UNet, samples, batch_size: int = 8, clamp: bool = True) -> np.ndarray:
    """Eval-mode predictions, clamped to [0, 1] by default."""
    X = samples.arrays(model.dtype)[0] if isinstance(samples, Dataset) else np.asarray(samples, dtype=model.dtype)
    if X.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) input, got {X.shape}")
    if X.shape[1] != model.config.in_channels:
        raise ShapeError(f"input has {X.shape[1]} channels, model expects {model.config.in_channels}")
    outs = [forward(model, X[i:i + batch_size], "eval").data for i in range(0, len(X), batch_size)]
    pred = np.concatenate(outs) if outs else np.zeros((0, model.config.out_channels) + X.shape[2:], model.dtype)
    return np.clip(pred, 0.0, 1.0) if clamp else pred


class UNetRegressor(RegressorMixin, BaseEstimator):
    """sklearn-style estimator around :func:`build_unet` / :func:`train`.

    ``X`` is (n, C_in, H, W), ``y`` is (n, C_out, H, W), both in [0, 1].
    """

    def __init__(self, base_features=64, depth=4, loss="L2", epochs=250, batch_size=8,
                 learning_rate=1e-3, log_every=1, random_state=0, dtype="float32"):
        self.base_features = base_features
        self.depth = depth
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.log_every = log_every
        self.random_state = random_state
        self.dtype = dtype

    def _check_X(self, X):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 4:
            raise ShapeError(f"X must be (n, C, H, W), got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains NaN or infinity")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=self.dtype)
        if y.ndim != 4 or y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]:
            raise ShapeError(f"y shape {y.shape} incompatible with X shape {X.shape}")
        seed = int(self.random_state or 0)
        cfg = UNetConfig(in_channels=X.shape[1], out_channels=y.shape[1],
                         base_features=self.base_features, depth=self.depth, seed=seed)
        cfg.check_extent(*X.shape[2:])
        self.model_ = build_unet(cfg, dtype=np.dtype(self.dtype))
        val = None
        if X_val is not None:
            val = (self._check_X(X_val), np.asarray(y_val, dtype=self.dtype))
        tcfg = TrainConfig(self.loss, self.epochs, self.batch_size, self.learning_rate, seed, self.log_every)
        _, self.loss_curve_ = train(self.model_, (X, y), val, tcfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} channels, estimator was fitted with {self.n_features_in_}")
        return predict(self.model_, X, self.batch_size)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = np.asarray(y)
        return r2_score(y.reshape(len(y), -1), pred.reshape(len(pred), -1),
                        sample_weight=sample_weight, multioutput="variance_weighted")
