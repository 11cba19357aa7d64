"""Finite-difference oracles and small fixtures shared by the tests."""

from __future__ import annotations

import numpy as np

from replaycodec.codec import Model, ModelConfig

FD_STEP = 1e-3


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, indices=None, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a, n = a[list(indices)], n[list(indices)]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


MICRO = ModelConfig(
    stages=2,
    input_size=(8, 8, 3),
    stem_factor=2,
    latent_channels=2,
    feature_channels=(8, 6),
    context_channels=6,
    blocks_per_stage=1,
    kernel_size=3,
    expansion=2,
    lambda_embed=4,
)


def micro_model(seed: int = 0, dtype=np.float64, **kw) -> Model:
    """A two-stage model with a few thousand parameters for gradient checks."""
    m = Model(MICRO.replace(init_seed=seed, **kw))
    # non-zero conditioner heads and decoder gains so that every parameter matters
    rng = np.random.default_rng(seed + 1)
    for p in m.params.values():
        if np.all(p.data == 0):
            p.data = rng.normal(0, 0.05, size=p.data.shape).astype(np.float32)
    return m.astype(dtype)


def small_model(seed: int = 0, **kw) -> Model:
    """Default 32x32 toy layout with narrower channels, for fast codec tests."""
    cfg = ModelConfig(feature_channels=(24, 16), context_channels=16, latent_channels=4, lambda_embed=8, init_seed=seed)
    return Model(cfg.replace(**kw))
