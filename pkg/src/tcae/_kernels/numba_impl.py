"""Numba-compiled kernels, signature-compatible with ``numpy_impl``.

Loops run serially so results do not depend on thread count. ``fastmath`` is
only enabled on reduction kernels; it lets LLVM vectorize the sums, which
changes rounding versus numpy but stays bitwise reproducible run to run.
"""

import math

import numpy as np
from numba import njit

_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


@njit(cache=True)
def _gelu_fwd_flat(x, out):
    for i in range(x.size):
        v = x[i]
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        out[i] = 0.5 * v * (1.0 + t)


def gelu_fwd(x):
    out = np.empty_like(x)
    _gelu_fwd_flat(x.reshape(-1), out.reshape(-1))
    return out


@njit(cache=True)
def _gelu_bwd_flat(x, gy, out):
    for i in range(x.size):
        v = x[i]
        v2 = v * v
        t = math.tanh(_GELU_C * (v + _GELU_A * v2 * v))
        d = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
        out[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d)


def gelu_bwd(x, gy):
    out = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), np.ascontiguousarray(gy).reshape(-1), out.reshape(-1))
    return out


@njit(cache=True, fastmath=True)
def _layernorm_fwd(x, eps, xhat, rstd):
    n, d = x.shape
    for r in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        var /= d
        s = 1.0 / math.sqrt(var + eps)
        rstd[r] = s
        for j in range(d):
            xhat[r, j] = (x[r, j] - mu) * s


def layernorm_fwd(x, eps):
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd(x, eps, xhat, rstd)
    return xhat, rstd


@njit(cache=True, fastmath=True)
def _layernorm_bwd(g, xhat, rstd, out):
    n, d = g.shape
    for r in range(n):
        a = 0.0
        b = 0.0
        for j in range(d):
            a += g[r, j]
            b += g[r, j] * xhat[r, j]
        a /= d
        b /= d
        s = rstd[r]
        for j in range(d):
            out[r, j] = (g[r, j] - a - xhat[r, j] * b) * s


def layernorm_bwd(gxhat, xhat, rstd):
    out = np.empty_like(xhat)
    _layernorm_bwd(np.ascontiguousarray(gxhat), xhat, rstd, out)
    return out


@njit(cache=True, fastmath=True)
def _sub_rowmax(x, out):
    n, d = x.shape
    for r in range(n):
        m = x[r, 0]
        for j in range(1, d):
            m = max(m, x[r, j])
        for j in range(d):
            out[r, j] = x[r, j] - m


@njit(cache=True, fastmath=True)
def _normalize_rows(z):
    n, d = z.shape
    for r in range(n):
        s = 0.0
        for j in range(d):
            s += z[r, j]
        inv = 1.0 / s
        for j in range(d):
            z[r, j] *= inv


def softmax_fwd(x):
    # exp stays in numpy (SIMD); the row passes are fused in numba
    out = np.empty_like(x)
    _sub_rowmax(x, out)
    np.exp(out, out=out)
    _normalize_rows(out)
    return out


@njit(cache=True, fastmath=True)
def _softmax_bwd(y, gy, out):
    n, d = y.shape
    for r in range(n):
        dot = 0.0
        for j in range(d):
            dot += gy[r, j] * y[r, j]
        for j in range(d):
            out[r, j] = y[r, j] * (gy[r, j] - dot)


def softmax_bwd(y, gy):
    out = np.empty_like(y)
    _softmax_bwd(y, np.ascontiguousarray(gy), out)
    return out


@njit(cache=True, fastmath=True)
def _im2col(x, k, stride, pad, ho, wo, cols):
    b, c, h, w = x.shape
    row = 0
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        iy = oy * stride + i - pad
                        for j in range(k):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                cols[row, col] = x[n, ch, iy, ix]
                            else:
                                cols[row, col] = 0.0
                            col += 1
                row += 1


def im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b * ho * wo, c * k * k), dtype=x.dtype)
    _im2col(x, k, stride, pad, ho, wo, cols)
    return cols


@njit(cache=True, fastmath=True)
def _col2im(cols, k, stride, pad, ho, wo, out):
    b, c, h, w = out.shape
    row = 0
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for ch in range(c):
                    for i in range(k):
                        iy = oy * stride + i - pad
                        for j in range(k):
                            ix = ox * stride + j - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                out[n, ch, iy, ix] += cols[row, col]
                            col += 1
                row += 1


def col2im(cols, x_shape, k, stride, pad):
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), k, stride, pad, ho, wo, out)
    return out


@njit(cache=True)
def _bilinear(img, top, left, crop_h, crop_w, out):
    c, h, w = img.shape
    _, oh, ow = out.shape
    sy = crop_h / oh
    sx = crop_w / ow
    for i in range(oh):
        y = top + (i + 0.5) * sy - 0.5
        y = min(max(y, 0.0), h - 1.0)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        wy = y - y0
        for j in range(ow):
            x = left + (j + 0.5) * sx - 0.5
            x = min(max(x, 0.0), w - 1.0)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            wx = x - x0
            for ch in range(c):
                t = img[ch, y0, x0] * (1.0 - wx) + img[ch, y0, x1] * wx
                bt = img[ch, y1, x0] * (1.0 - wx) + img[ch, y1, x1] * wx
                out[ch, i, j] = t * (1.0 - wy) + bt * wy


def bilinear_sample(img, top, left, crop_h, crop_w, out_h, out_w):
    out = np.empty((img.shape[0], out_h, out_w), dtype=img.dtype)
    _bilinear(np.ascontiguousarray(img), float(top), float(left), float(crop_h),
              float(crop_w), out)
    return out
