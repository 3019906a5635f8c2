"""Quick build verification: layer gradient checks and the convolution oracle."""

from __future__ import annotations

import time

import numpy as np

from .gradcheck import grad_check
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
from .unet import UNetConfig, build_unet, forward

LAYER_TOL = 1e-4
NET_TOL = 1e-3


def conv3x3_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nested-loop 3×3 cross-correlation with zero padding 1."""
    B, C, H, W = x.shape
    out = np.zeros((B, w.shape[0], H, W), dtype=x.dtype)
    for n in range(B):
        for co in range(w.shape[0]):
            for i in range(H):
                for j in range(W):
                    acc = b[co]
                    for ci in range(C):
                        for di in range(3):
                            for dj in range(3):
                                u, v = i + di - 1, j + dj - 1
                                if 0 <= u < H and 0 <= v < W:
                                    acc = acc + w[co, ci, di, dj] * x[n, ci, u, v]
                    out[n, co, i, j] = acc
    return out


def dyadic(rng: np.random.Generator, shape, dtype=np.float64, bits: int = 3, span: int = 8) -> np.ndarray:
    """Random multiples of 2**-bits in [-span, span]: sums of their products are exact."""
    return (rng.integers(-span << bits, (span << bits) + 1, size=shape) / (1 << bits)).astype(dtype)


def layer_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every layer, in float64."""
    def r(*s):
        return rng.standard_normal(s)

    # relu and maxpool are checked away from their kinks
    xr = r(2, 3, 4, 4)
    xr[np.abs(xr) < 0.05] = 0.5
    xm = rng.permutation(np.arange(2 * 3 * 4 * 4, dtype=np.float64)).reshape(2, 3, 4, 4) * 0.1
    state = BatchNormState.fresh(3)
    return [
        ("conv3x3", conv3x3, [r(2, 3, 5, 4), r(4, 3, 3, 3), r(4)]),
        ("conv1x1", conv1x1, [r(2, 3, 4, 4), r(2, 3, 1, 1), r(2)]),
        ("upconv2x2", upconv2x2, [r(2, 3, 3, 2), r(3, 2, 2, 2), r(2)]),
        ("maxpool2x2", maxpool2x2, [xm]),
        ("relu", relu, [xr]),
        ("concat", concat_channels, [r(2, 2, 3, 3), r(2, 3, 3, 3)]),
        ("batchnorm_train",
         lambda x, g, b: batchnorm2d(x, g, b, BatchNormState.fresh(3), "train", update_stats=False),
         [r(4, 3, 3, 3), r(3), r(3)]),
        ("batchnorm_eval",
         lambda x, g, b: batchnorm2d(x, g, b, state, "eval"),
         [r(4, 3, 3, 3), r(3), r(3)]),
    ]


def unet_gradcheck(seed: int = 0, max_coords: int = 6) -> float:
    """Full depth-2/base-4 U-net in float64, every parameter tensor and the input."""
    cfg = UNetConfig(in_channels=2, out_channels=2, base_features=4, depth=2, seed=seed)
    model = build_unet(cfg, dtype=np.float64)
    names = model.parameter_names
    x = np.random.default_rng(seed + 1).standard_normal((2, 2, 8, 8))

    def fn(xt, *ps):
        for name, p in zip(names, ps):
            model.store[name] = p
        return forward(model, xt, "train")

    originals = [model.store[n] for n in names]
    try:
        return grad_check(fn, [x] + [p.data for p in originals], seed=seed, max_coords=max_coords)
    finally:
        for name, p in zip(names, originals):
            model.store[name] = p


def run_selftest(emit=print, oracle_cases: int = 20) -> list[str]:
    failures = []
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for name, fn, inputs in layer_cases(rng):
        err = grad_check(fn, inputs)
        ok = err < LAYER_TOL
        emit(f"{'PASS' if ok else 'FAIL'} gradcheck {name}: max rel err {err:.2e}")
        if not ok:
            failures.append(name)
    err = unet_gradcheck()
    ok = err < NET_TOL
    emit(f"{'PASS' if ok else 'FAIL'} gradcheck unet: max rel err {err:.2e}")
    if not ok:
        failures.append("unet")
    mismatches = 0
    for _ in range(oracle_cases):
        B, C, Co = (int(v) for v in rng.integers(1, 4, 3))
        H, W = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        x, w, b = dyadic(rng, (B, C, H, W)), dyadic(rng, (Co, C, 3, 3)), dyadic(rng, (Co,))
        got = conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
        mismatches += not np.array_equal(got, conv3x3_reference(x, w, b))
    ok = mismatches == 0
    emit(f"{'PASS' if ok else 'FAIL'} conv3x3 oracle: {oracle_cases - mismatches}/{oracle_cases} bit-exact")
    if not ok:
        failures.append("conv oracle")
    emit(f"selftest finished in {time.perf_counter() - t0:.1f}s")
    return failures
