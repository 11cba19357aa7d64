"""Differentiable operations on NCHW tensors.

Every op returns a new :class:`Tensor`; backward closures return one gradient
per parent (``None`` where the parent needs none).  Forward computations are
pure functions of their inputs, so repeated calls are bit-identical.
"""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from .tensor import DimensionError, Tensor, as_tensor, make_node

GELU_COEF = 1.702
LOG2E = 1.0 / math.log(2.0)
LIKELIHOOD_FLOOR = 1e-9


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a 4-D (batch, channel, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def backward_s(g):
            return (g * s,)

        return make_node(a.data * s, (a,), backward_s)
    a = as_tensor(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (2.0 * g * xd,)

    return make_node(xd * xd, (x,), backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return make_node(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape

    def backward(g):
        return (g.reshape(orig),)

    return make_node(x.data.reshape(shape), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x)."""
    xd = x.data
    # sigmoid(a) == 0.5 * (1 + tanh(a / 2)); numpy's tanh is much faster than expit
    s = np.tanh((0.5 * GELU_COEF) * xd)
    s += 1.0
    s *= 0.5
    out = xd * s

    def backward(g):
        d = 1.0 - s
        d *= out
        d *= GELU_COEF
        d += s
        d *= g
        return (d,)

    return make_node(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * expit(xd),)

    return make_node(np.logaddexp(0.0, xd).astype(xd.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_node(x.data[idx], (x,), backward)


def expand_spatial(x: Tensor, batch: int, height: int, width: int) -> Tensor:
    """Broadcast a (1|B, C, 1, 1) tensor to (batch, C, height, width)."""
    if x.ndim != 4 or x.shape[2:] != (1, 1):
        raise DimensionError(f"expand_spatial needs (B, C, 1, 1), got {x.shape}")
    shape = x.shape
    out = np.broadcast_to(x.data, (batch, shape[1], height, width)).copy()

    def backward(g):
        return (_unbroadcast(g, shape),)

    return make_node(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_4d(x, "upsample_nearest2x")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward)


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    """(B, C*f*f, H, W) -> (B, C, H*f, W*f)."""
    _check_4d(x, "depth_to_space")
    b, cf, h, w = x.shape
    f = factor
    if cf % (f * f):
        raise DimensionError(f"channels {cf} not divisible by factor^2={f * f}")
    c = cf // (f * f)
    out = x.data.reshape(b, c, f, f, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * f, w * f)

    def backward(g):
        return (g.reshape(b, c, h, f, w, f).transpose(0, 1, 3, 5, 2, 4).reshape(b, cf, h, w),)

    return make_node(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# normalisation / modulation


def channel_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each spatial position to zero mean, unit variance over channels."""
    _check_4d(x, "channel_norm")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    xc = xd - xd.mean(axis=1, keepdims=True)
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return make_node(y, (x,), backward)


def affine_modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """x * (1 + scale) + shift with per-channel (C,) or per-item (B, C) vectors."""
    _check_4d(x, "affine_modulate")
    c = x.shape[1]
    for name, v in (("scale", scale), ("shift", shift)):
        if v.shape[-1] != c or v.ndim not in (1, 2):
            raise DimensionError(f"{name} shape {v.shape} does not match channel axis of size {c}")
    s_shape, t_shape = scale.shape, shift.shape
    s4 = scale.data.reshape((-1, c, 1, 1) if scale.ndim == 2 else (1, c, 1, 1))
    t4 = shift.data.reshape((-1, c, 1, 1) if shift.ndim == 2 else (1, c, 1, 1))
    xd = x.data
    out = xd * (1.0 + s4) + t4

    def backward(g):
        gx = g * (1.0 + s4)
        gs = (g * xd).sum(axis=(2, 3))
        gt = g.sum(axis=(2, 3))
        if len(s_shape) == 1:
            gs = gs.sum(axis=0)
        if len(t_shape) == 1:
            gt = gt.sum(axis=0)
        return gx, gs.reshape(s_shape), gt.reshape(t_shape)

    return make_node(out, (x, scale, shift), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (B, in) @ weight(out, in).T + bias."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zeros":
        return np.pad(x, width)
    if mode == "edge":
        return np.pad(x, width, mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def _unpad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zeros":
        return g[:, :, p:-p, p:-p]
    # edge: fold padded rows/cols back onto the border they replicate
    h = g.shape[2] - 2 * p
    rows = g[:, :, p:p + h, :].copy()
    rows[:, :, 0, :] += g[:, :, :p, :].sum(axis=2)
    rows[:, :, -1, :] += g[:, :, p + h:, :].sum(axis=2)
    w = g.shape[3] - 2 * p
    out = rows[:, :, :, p:p + w].copy()
    out[:, :, :, 0] += rows[:, :, :, :p].sum(axis=3)
    out[:, :, :, -1] += rows[:, :, :, p + w:].sum(axis=3)
    return out


def _conv_general(x, w, b, stride, padding, groups, pad_mode):
    """im2col reference path valid for any stride/padding/groups."""
    B, C, H, W = x.shape
    Cout, Cg, K, K2 = w.shape
    xp = _pad(x.data, padding, pad_mode)
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - K) // stride + 1
    Wo = (Wp - K2) // stride + 1
    cols = np.empty((B, C, K, K2, Ho, Wo), dtype=xp.dtype)
    for i in range(K):
        for j in range(K2):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    og = Cout // groups
    cols_g = cols.reshape(B, groups, Cg * K * K2, Ho * Wo)
    w_g = w.data.reshape(groups, og, Cg * K * K2)
    out = np.matmul(w_g[None], cols_g).reshape(B, Cout, Ho, Wo)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)

    def backward(g):
        g_g = g.reshape(B, groups, og, Ho * Wo)
        gw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g).reshape(B, C, K, K2, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(K):
            for j in range(K2):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gcols[:, :, i, j]
        gx = _unpad(gxp, padding, pad_mode)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def _conv_pointwise(x, w, b):
    B, C, H, W = x.shape
    Cout = w.shape[0]
    X = x.data.reshape(B, C, H * W)
    Wm = w.data.reshape(Cout, C)
    out = np.matmul(Wm, X)
    if b is not None:
        out += b.data.reshape(1, Cout, 1)
    out = out.reshape(B, Cout, H, W)

    def backward(g):
        G = g.reshape(B, Cout, H * W)
        gx = np.matmul(Wm.T, G).reshape(B, C, H, W) if x.requires_grad else None
        gw = np.matmul(G, X.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, G.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def _conv_patchify(x, w, b, k):
    B, C, H, W = x.shape
    Cout = w.shape[0]
    Ho, Wo = H // k, W // k
    X = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 2, 4, 1, 3, 5).reshape(B * Ho * Wo, C * k * k)
    Wm = w.data.reshape(Cout, C * k * k)
    out = X @ Wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        G = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gx = None
        if x.requires_grad:
            gx = (G @ Wm).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
        gw = (G.T @ X).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, G.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


@functools.lru_cache(maxsize=64)
def _shift_operators(h: int, w: int, k: int, pad_mode: str, dtype_name: str) -> np.ndarray:
    """Stacked (k*k, h*w, h*w) 0/1 matrices: tap t maps input position to output position."""
    p = k // 2
    S = np.zeros((k * k, h * w, h * w), dtype=dtype_name)
    oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_idx = (oi * w + oj).ravel()
    for di in range(k):
        for dj in range(k):
            ii = oi + di - p
            jj = oj + dj - p
            if pad_mode == "edge":
                ii = np.clip(ii, 0, h - 1)
                jj = np.clip(jj, 0, w - 1)
                valid = np.ones_like(ii, dtype=bool)
            else:
                valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            src = (ii * w + jj).ravel()
            np.add.at(S[di * k + dj], (out_idx[valid.ravel()], src[valid.ravel()]), 1.0)
    S.setflags(write=False)
    return S


def _conv_depthwise(x, w, b, pad_mode):
    B, C, H, W = x.shape
    k = w.shape[-1]
    hw = H * W
    S = _shift_operators(H, W, k, pad_mode, x.dtype.name).reshape(k * k, hw * hw)
    wk = w.data.reshape(C, k * k)
    M = (wk @ S).reshape(C, hw, hw)
    X = np.ascontiguousarray(x.data.reshape(B, C, hw).transpose(1, 2, 0))  # (C, hw, B)
    Y = np.matmul(M, X)
    out = Y.transpose(2, 0, 1).reshape(B, C, H, W)
    if b is not None:
        out = out + b.data.reshape(1, C, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        G = np.ascontiguousarray(g.reshape(B, C, hw).transpose(1, 2, 0))
        gx = None
        if x.requires_grad:
            gx = np.matmul(M.transpose(0, 2, 1), G).transpose(2, 0, 1).reshape(B, C, H, W)
            gx = np.ascontiguousarray(gx)
        gw = None
        if w.requires_grad:
            gM = np.matmul(G, X.transpose(0, 2, 1)).reshape(C, hw * hw)
            gw = (gM @ S.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    pad_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights.

    Output spatial size is ``floor((in + 2*padding - k) / stride) + 1``.
    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (replicate border).
    """
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D (out, in/groups, kh, kw), got {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    B, C, H, W = x.shape
    Cout, Cg, K, K2 = weight.shape
    if groups < 1 or C % groups or Cout % groups:
        raise DimensionError(f"conv2d: channels in={C} (axis 1) / out={Cout} (axis 0) not divisible by groups={groups}")
    if Cg != C // groups:
        raise DimensionError(f"conv2d: input channel axis 1 has {C} channels, weight axis 1 expects {Cg * groups} (groups={groups})")
    if bias is not None and bias.shape != (Cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    if H + 2 * padding < K or W + 2 * padding < K2:
        raise DimensionError(f"conv2d: kernel {K}x{K2} larger than padded input {H + 2 * padding}x{W + 2 * padding} (axes 2, 3)")

    if K == K2:
        if K == 1 and stride == 1 and padding == 0 and groups == 1:
            return _conv_pointwise(x, weight, bias)
        if groups == C == Cout and stride == 1 and K % 2 == 1 and 2 * padding == K - 1 and H * W <= 256:
            return _conv_depthwise(x, weight, bias, pad_mode)
        if groups == 1 and stride == K and padding == 0 and H % K == 0 and W % K == 0:
            return _conv_patchify(x, weight, bias, K)
    return _conv_general(x, weight, bias, stride, padding, groups, pad_mode)


def conv2d_reference(x, weight, bias=None, stride=1, padding=0, groups=1, pad_mode="zeros") -> Tensor:
    """Always take the im2col route (used to cross-check the fast paths)."""
    return _conv_general(x, weight, bias, stride, padding, groups, pad_mode)


# ---------------------------------------------------------------------------
# rate and distortion terms


def gaussian_bits(zhat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise -log2 of the Gaussian mass on [zhat-0.5, zhat+0.5].

    Uses the reflected form so both tails keep precision; the likelihood is
    floored at 1e-9 (zero gradient below the floor).
    """
    zd, md, sd = zhat.data, mu.data, sigma.data
    dtype = zd.dtype
    v = zd - md
    sign = np.where(v >= 0, 1.0, -1.0).astype(dtype)
    a = np.abs(v)
    inv_s = 1.0 / sd
    hi = (0.5 - a) * inv_s
    lo = (-0.5 - a) * inv_s
    p = ndtr(hi) - ndtr(lo)
    floored = p < LIKELIHOOD_FLOOR
    p_safe = np.maximum(p, LIKELIHOOD_FLOOR)
    bits = (-np.log2(p_safe)).astype(dtype, copy=False)

    def backward(g):
        phi_hi = np.exp(-0.5 * hi * hi) / math.sqrt(2 * math.pi)
        phi_lo = np.exp(-0.5 * lo * lo) / math.sqrt(2 * math.pi)
        coef = np.where(floored, 0.0, -g * LOG2E / p_safe)
        # dp/da and dp/dsigma in the reflected variable a = |z - mu|
        dp_da = (-phi_hi + phi_lo) * inv_s
        dp_ds = -(phi_hi * hi - phi_lo * lo) * inv_s
        gv = (coef * dp_da * sign).astype(dtype, copy=False)
        gs = (coef * dp_ds).astype(dtype, copy=False)
        return gv, -gv, gs

    return make_node(bits, (zhat, mu, sigma), backward)

