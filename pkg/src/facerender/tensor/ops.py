"""Structured tensor operations: convolutions, sampling, pooling, recurrence.

Convolutions run as one GEMM over an im2col matrix; their backward passes
recompute the column matrix from the saved padded input instead of keeping
it alive, which bounds per-step memory at the cost of one extra copy.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    DimensionError,
    Tensor,
    absolute,
    add,
    add_bias,
    affine_channels,
    concat,
    div,
    leaky_relu,
    linear,
    make_node,
    matmul,
    mul,
    narrow,
    sigmoid,
    sqrt,
    sub,
    tanh,
    tmean,
    tsum,
)

# -- convolutions -------------------------------------------------------------


def _conv_out_len(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x[N,C,H,W] * weight[F,C,kh,kw] + bias[F] -> [N,F,H',W']."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: need 4D input/weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: input channels {c} != weight channels {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    ho, wo = _conv_out_len(h, kh, stride, padding), _conv_out_len(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding \
        else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # One im2col copy, kept alive for the weight-gradient GEMM in backward.
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2d = weight.data.reshape(f, -1)
    prod = cols @ w2d.T
    prod += bias.data
    out = np.ascontiguousarray(prod.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = gb = gx = None
        if bias.requires_grad:
            gb = gm.sum(axis=0)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(f, c, kh, kw)
        if x.requires_grad:
            dcols = np.ascontiguousarray(
                (gm @ w2d).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return make_node(out, (x, weight, bias), vjp)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x[N,C,T] * weight[F,C,k] + bias[F] -> [N,F,T']."""
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d: need 3D input/weight, got {x.shape}, {weight.shape}")
    n, c, t = x.shape
    f, cw, k = weight.shape
    if cw != c:
        raise DimensionError(f"conv1d: input channels {c} != weight channels {cw}")
    if k % 2 == 0:
        raise DimensionError(f"conv1d: kernel must be odd, got {k}")
    if t + 2 * padding < k:
        raise DimensionError(f"conv1d: padded length {t + 2 * padding} smaller than kernel {k}")
    if bias.shape != (f,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({f},)")
    to = _conv_out_len(t, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    cols = win.transpose(0, 2, 1, 3).reshape(n * to, c * k)
    w2d = weight.data.reshape(f, -1)
    prod = cols @ w2d.T
    prod += bias.data
    out = prod.reshape(n, to, f).transpose(0, 2, 1)

    def vjp(g):
        gm = g.transpose(0, 2, 1).reshape(n * to, f)
        gw = gb = gx = None
        if bias.requires_grad:
            gb = gm.sum(axis=0)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(f, c, k)
        if x.requires_grad:
            dcols = (gm @ w2d).reshape(n, to, c, k)
            gxp = np.zeros((n, c, t + 2 * padding))
            for i in range(k):
                gxp[:, :, i:i + stride * to:stride] += dcols[:, :, :, i].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + t] if padding else gxp
        return gx, gw, gb

    return make_node(out, (x, weight, bias), vjp)


# -- spatial resampling -------------------------------------------------------


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x2: spatial size {h}x{w} not divisible by 2")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_node(out, (x,), vjp)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), vjp)


def identity_grid(n: int, h: int, w: int) -> np.ndarray:
    """Absolute pixel coordinates, layout [N,2,H,W] with channel 0 = x."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.stack([xs, ys])
    return np.broadcast_to(grid, (n, 2, h, w)).copy()


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample x[N,C,H,W] at absolute pixel positions coords[N,2,H',W'].

    Out-of-range positions clamp to the border. Coordinate gradients use the
    interpolation cell of the clamped position (zero outside the image).
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise DimensionError(f"bilinear_sample: got input {x.shape}, coords {coords.shape}")
    if coords.shape[0] != x.shape[0]:
        raise DimensionError(f"bilinear_sample: batch mismatch {x.shape[0]} vs {coords.shape[0]}")
    n, c, h, w = x.shape
    ho, wo = coords.shape[2], coords.shape[3]

    cx = np.clip(coords.data[:, 0], 0.0, w - 1.0)
    cy = np.clip(coords.data[:, 1], 0.0, h - 1.0)
    inside_x = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < w - 1.0)
    inside_y = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < h - 1.0)

    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = cx - x0
    wy = cy - y0

    bidx = np.arange(n)[:, None, None]
    v00 = x.data[bidx, :, y0, x0]  # [N,Ho,Wo,C]
    v01 = x.data[bidx, :, y0, x1]
    v10 = x.data[bidx, :, y1, x0]
    v11 = x.data[bidx, :, y1, x1]
    wxe = wx[..., None]
    wye = wy[..., None]
    top = v00 * (1.0 - wxe) + v01 * wxe
    bot = v10 * (1.0 - wxe) + v11 * wxe
    out = (top * (1.0 - wye) + bot * wye).transpose(0, 3, 1, 2)

    def vjp(g):
        gq = g.transpose(0, 2, 3, 1)  # [N,Ho,Wo,C]
        gx = gc = None
        if x.requires_grad:
            w00 = ((1.0 - wx) * (1.0 - wy))[..., None]
            w01 = (wx * (1.0 - wy))[..., None]
            w10 = ((1.0 - wx) * wy)[..., None]
            w11 = (wx * wy)[..., None]
            flat = np.zeros((n * h * w, c), dtype=np.float64)
            base = (np.arange(n)[:, None, None] * h)
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                idx = ((base + yy) * w + xx).ravel()
                np.add.at(flat, idx, (gq * ww).reshape(-1, c))
            gx = flat.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if coords.requires_grad:
            dvx = ((v01 - v00) * (1.0 - wye) + (v11 - v10) * wye)
            dvy = (bot - top)
            gcx = (gq * dvx).sum(axis=3) * inside_x
            gcy = (gq * dvy).sum(axis=3) * inside_y
            gc = np.stack([gcx, gcy], axis=1)
        return gx, gc

    return make_node(np.ascontiguousarray(out), (x, coords), vjp)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with corner-aligned coordinates (corners map to corners)."""
    n, _, h, w = x.shape
    sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    ys, xs = np.meshgrid(np.arange(out_h) * sy, np.arange(out_w) * sx, indexing="ij")
    grid = np.broadcast_to(np.stack([xs, ys]), (n, 2, out_h, out_w)).copy()
    return bilinear_sample(x, Tensor(grid))


# -- normalization building blocks ---------------------------------------------

INSTANCE_EPS = 1e-5


def instance_stats(x: Tensor, eps: float = INSTANCE_EPS) -> Tuple[Tensor, Tensor]:
    """Per-(sample, channel) spatial mean and std of x[N,C,H,W].

    Std adds ``eps`` to the variance before the square root so constant
    channels stay differentiable.
    """
    if x.ndim != 4:
        raise DimensionError(f"instance_stats: need [N,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise DimensionError(f"instance_stats: spatial size {x.shape[2]}x{x.shape[3]} degenerate")
    mean = tmean(x, axis=(2, 3))
    centered = affine_channels(x, None, mul(mean, -1.0))
    var = tmean(mul(centered, centered), axis=(2, 3))
    std = sqrt(add(var, eps))
    return mean, std


def instance_norm(x: Tensor, eps: float = INSTANCE_EPS) -> Tensor:
    mean, std = instance_stats(x, eps)
    inv = div(1.0, std)
    return affine_channels(x, inv, mul(mul(mean, inv), -1.0))


def feature_affine(x: Tensor, scale: Optional[Tensor] = None, shift: Optional[Tensor] = None) -> Tensor:
    """Per-feature affine on x[N,C]: x * scale[C] + shift[C]."""
    if x.ndim != 2:
        raise DimensionError(f"feature_affine: need [N,C], got {x.shape}")
    c = x.shape[1]
    for t, tag in ((scale, "scale"), (shift, "shift")):
        if t is not None and t.shape != (c,):
            raise DimensionError(f"feature_affine: {tag} shape {t.shape} != ({c},)")
    out = x.data
    if scale is not None:
        out = out * scale.data
    if shift is not None:
        out = out + shift.data
    parents = [x] + [t for t in (scale, shift) if t is not None]

    def vjp(g):
        gx = g * scale.data if scale is not None else g
        grads = [gx]
        if scale is not None:
            grads.append((g * x.data).sum(axis=0) if scale.requires_grad else None)
        if shift is not None:
            grads.append(g.sum(axis=0) if shift.requires_grad else None)
        return tuple(grads)

    return make_node(out, tuple(parents), vjp)


def broadcast_scalar(s: Tensor, n: int) -> Tensor:
    """Replicate a scalar tensor into a length-n vector."""
    if s.data.shape != ():
        raise DimensionError(f"broadcast_scalar: need scalar, got shape {s.data.shape}")
    return make_node(np.full(n, float(s.data)), (s,), lambda g: (np.asarray(g.sum()),))


# -- recurrence -----------------------------------------------------------------


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """One LSTM step. Gate layout along the 4E axis: input, forget, cell, output.

    x[N,D], h[N,E], c[N,E]; wx[D,4E], wh[E,4E], b[4E].
    """
    if x.ndim != 2 or h.ndim != 2 or c.ndim != 2:
        raise DimensionError("lstm_cell: x, h, c must be 2D")
    d, e = x.shape[1], h.shape[1]
    if wx.shape != (d, 4 * e) or wh.shape != (e, 4 * e) or b.shape != (4 * e,):
        raise DimensionError(
            f"lstm_cell: parameter shapes {wx.shape}/{wh.shape}/{b.shape} inconsistent with D={d}, E={e}"
        )
    if h.shape != c.shape or x.shape[0] != h.shape[0]:
        raise DimensionError(f"lstm_cell: state shapes {h.shape}/{c.shape} mismatch batch {x.shape[0]}")
    gates = add_bias(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(gates, 1, 0, e))
    f = sigmoid(narrow(gates, 1, e, e))
    g = tanh(narrow(gates, 1, 2 * e, e))
    o = sigmoid(narrow(gates, 1, 3 * e, e))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# -- linear-algebra primitives for invertible layers ----------------------------

SINGULAR_DET_FLOOR = 1e-12


def _checked_logdet(w: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(w)
    if sign == 0.0 or logdet < np.log(SINGULAR_DET_FLOOR):
        raise ValueError(f"matrix is numerically singular (|det| <= {SINGULAR_DET_FLOOR:g})")
    return float(logdet)


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| for square W, backward via W^{-T}."""
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"logabsdet: need square matrix, got {w.shape}")
    val = _checked_logdet(w.data)
    inv_t = np.linalg.inv(w.data).T

    def vjp(g):
        return (g * inv_t,)

    return make_node(np.float64(val), (w,), vjp)


def rows_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Row-vector convention y_t = W x_t for batches: out[N,C] = x[N,C] @ W^T."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"rows_matmul: {x.shape} with {w.shape}")

    def vjp(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        return gx, gw

    return make_node(x.data @ w.data.T, (x, w), vjp)


def rows_solve(w: Tensor, y: Tensor) -> Tensor:
    """Inverse of ``rows_matmul``: returns x[N,C] with W x_t = y_t per row."""
    if y.ndim != 2 or w.ndim != 2 or w.shape[0] != w.shape[1] or y.shape[1] != w.shape[0]:
        raise DimensionError(f"rows_solve: {w.shape} with {y.shape}")
    _checked_logdet(w.data)
    inv = np.linalg.inv(w.data)
    out = y.data @ inv.T

    def vjp(g):
        gy = g @ inv if y.requires_grad else None
        gw = -inv.T @ (g.T @ y.data) @ inv.T if w.requires_grad else None
        return gw, gy

    return make_node(out, (w, y), vjp)
