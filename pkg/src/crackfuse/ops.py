"""Differentiable array primitives.

Every operation here is pure and returns ``(output, vjp)`` where ``vjp`` maps
an upstream cotangent of the output's shape to gradients for each
differentiable input, in argument order. There is no tape: composite layers
chain these closures by hand in reverse order.

Layout conventions: feature axes last for pointwise/affine ops, images as
``[C, H, W]`` with an optional leading batch axis for spatial ops.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x):
    s = _sigmoid(x)

    def vjp(dy):
        return (dy * s * (1.0 - s),)

    return s, vjp


def silu(x):
    """x * sigmoid(x), elementwise."""
    s = _sigmoid(x)
    y = x * s

    def vjp(dy):
        return (dy * (s * (1.0 + x * (1.0 - s))),)

    return y, vjp


def relu(x):
    y = np.maximum(x, 0.0)

    def vjp(dy):
        return (dy * (x > 0.0),)

    return y, vjp


def softplus(x):
    y = np.logaddexp(0.0, x)
    s = _sigmoid(x)

    def vjp(dy):
        return (dy * s,)

    return y, vjp


def clamp01(x):
    """Clip to [0, 1]; gradient is zero where the clamp is active."""
    y = np.clip(x, 0.0, 1.0)
    inside = (x > 0.0) & (x < 1.0)

    def vjp(dy):
        return (dy * inside,)

    return y, vjp


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine.

    gamma and beta must match the last-axis extent.
    """
    m = x.shape[-1]
    if m == 0:
        raise ValueError("layer_norm: last axis has extent 0")
    if gamma.shape != (m,) or beta.shape != (m,):
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match axis extent {m}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    y = xh * gamma + beta

    def vjp(dy):
        lead = tuple(range(dy.ndim - 1))
        dgamma = (dy * xh).sum(axis=lead)
        dbeta = dy.sum(axis=lead)
        g = dy * gamma
        dx = inv * (g - g.mean(axis=-1, keepdims=True) - xh * (g * xh).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return y, vjp


def linear(x, w, b):
    """Affine map over the last axis: y = x @ w + b with w of shape [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input extent {x.shape[-1]} does not match weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match weight cols {w.shape[1]}")
    y = x @ w + b

    def vjp(dy):
        dx = dy @ w.T
        x2 = x.reshape(-1, w.shape[0])
        dy2 = dy.reshape(-1, w.shape[1])
        dw = x2.T @ dy2
        db = dy2.sum(axis=0)
        return dx, dw, db

    return y, vjp


def _lift_chw(x):
    """Accept [C,H,W] or [B,C,H,W]; return 4-d view and a flag to squeeze back."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a [C,H,W] or [B,C,H,W] array, got shape {x.shape}")


def depthwise_conv2d(x, k):
    """Per-channel 2d convolution, odd kernel, zero same-padding.

    x: [C,H,W] or [B,C,H,W]; k: [C,kh,kw]. Channel i of the output depends
    only on channel i of the input.
    """
    x4, squeeze = _lift_chw(x)
    c, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise_conv2d: kernel extents must be odd, got {kh}x{kw}")
    if x4.shape[1] != c:
        raise ValueError(f"depthwise_conv2d: {x4.shape[1]} channels vs kernel {c}")
    b, _, h, w = x4.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros_like(x4)
    for u in range(kh):
        for v in range(kw):
            y += k[:, u, v][None, :, None, None] * xp[:, :, u : u + h, v : v + w]

    def vjp(dy):
        dy4 = dy[None] if squeeze else dy
        dk = np.empty_like(k)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u : u + h, v : v + w]
                dk[:, u, v] = np.einsum("bchw,bchw->c", dy4, patch)
                dxp[:, :, u : u + h, v : v + w] += k[:, u, v][None, :, None, None] * dy4
        dx = dxp[:, :, ph : ph + h, pw : pw + w]
        return (dx[0] if squeeze else dx, dk)

    return (y[0] if squeeze else y), vjp


def conv2d(x, w, b):
    """Dense 2d convolution, odd kernel, zero same-padding.

    x: [Cin,H,W] or [B,Cin,H,W]; w: [Cout,Cin,kh,kw]; b: [Cout]. Evaluated as
    one channel-mixing matmul per kernel tap, keeping memory at O(image) for
    large inputs.
    """
    x4, squeeze = _lift_chw(x)
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if x4.shape[1] != ci:
        raise ValueError(f"conv2d: input has {x4.shape[1]} channels, weight expects {ci}")
    bsz, _, h, wd = x4.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.empty((bsz, co, h, wd))
    y[:] = b[None, :, None, None]
    for u in range(kh):
        for v in range(kw):
            y += np.einsum("oc,bchw->bohw", w[:, :, u, v],
                           xp[:, :, u : u + h, v : v + wd], optimize=True)

    def vjp(dy):
        dy4 = dy[None] if squeeze else dy
        db = dy4.sum(axis=(0, 2, 3))
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u : u + h, v : v + wd]
                dw[:, :, u, v] = np.einsum("bohw,bchw->oc", dy4, patch, optimize=True)
                dxp[:, :, u : u + h, v : v + wd] += np.einsum(
                    "oc,bohw->bchw", w[:, :, u, v], dy4, optimize=True)
        dx = dxp[:, :, ph : ph + h, pw : pw + wd]
        return (dx[0] if squeeze else dx, dw, db)

    return (y[0] if squeeze else y), vjp


# ---------------------------------------------------------------------------
# Separable resampling. Each resize/pool is a linear operator applied
# independently to rows and columns, so forward is Mr @ x @ Mc^T and the
# vjp is Mr^T @ dy @ Mc. Matrices are cached per (n_in, n_out).


def _cubic_weight(d, a=-0.5):
    # Catmull-Rom kernel (a = -0.5)
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    if d < 2.0:
        return a * (d**3 - 5.0 * d**2 + 8.0 * d - 4.0)
    return 0.0


@lru_cache(maxsize=None)
def _resample_matrix(n_in: int, n_out: int, mode: str):
    m = np.zeros((n_out, n_in))
    if mode == "pool":
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -(-(i + 1) * n_in // n_out)  # ceil
            m[i, lo:hi] = 1.0 / (hi - lo)
    else:
        scale = n_in / n_out
        for i in range(n_out):
            src = (i + 0.5) * scale - 0.5
            i0 = int(np.floor(src))
            t = src - i0
            if mode == "bicubic":
                taps = [(i0 - 1, _cubic_weight(t + 1.0)), (i0, _cubic_weight(t)),
                        (i0 + 1, _cubic_weight(1.0 - t)), (i0 + 2, _cubic_weight(2.0 - t))]
            elif mode == "bilinear":
                taps = [(i0, 1.0 - t), (i0 + 1, t)]
            else:
                raise ValueError(f"unknown resample mode {mode!r}")
            for j, wgt in taps:
                m[i, min(max(j, 0), n_in - 1)] += wgt  # clamp-to-edge
    m.setflags(write=False)
    return m


def _separable(x, out_h, out_w, mode):
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be >= 1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ValueError(f"expected at least a [H,W] array, got shape {x.shape}")
    h, w = x.shape[-2:]
    mr = _resample_matrix(h, out_h, mode)
    mc = _resample_matrix(w, out_w, mode)
    y = mr @ x @ mc.T

    def vjp(dy):
        return (mr.T @ dy @ mc,)

    return y, vjp


def resize_bicubic(x, out_h, out_w):
    """Separable Catmull-Rom resampling, clamp-to-edge. Exact when dims match."""
    return _separable(x, out_h, out_w, "bicubic")


def resize_bilinear(x, out_h, out_w):
    return _separable(x, out_h, out_w, "bilinear")


def adaptive_avg_pool2d(x, out_h, out_w):
    """Mean pooling onto an out_h x out_w grid of near-equal windows."""
    return _separable(x, out_h, out_w, "pool")


def resize_nearest(x, out_h, out_w):
    """Nearest-neighbor resampling (labels/masks); not differentiable."""
    h, w = x.shape[-2:]
    rows = ((2 * np.arange(out_h) + 1) * h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * w) // (2 * out_w)
    return x[..., rows.clip(0, h - 1)[:, None], cols.clip(0, w - 1)[None, :]]
