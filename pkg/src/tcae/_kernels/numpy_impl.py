"""Pure-numpy reference kernels.

Every function here has a twin in ``numba_impl`` with the same signature.
Inputs are assumed C-contiguous; callers in ``tcae.tensor`` guarantee it.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_bwd(x, gy):
    x2 = x * x
    th = _GELU_A * x2
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 a x^2)
    x2 *= 3.0 * _GELU_A
    x2 += 1.0
    x2 *= _GELU_C
    x2 *= x
    x2 *= 0.5
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    x2 *= sech2
    th += 1.0
    th *= 0.5
    th += x2
    th *= gy
    return th


def layernorm_fwd(x, eps):
    """Normalize rows of a 2-D array. Returns (xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layernorm_bwd(gxhat, xhat, rstd):
    a = gxhat.mean(axis=1, keepdims=True)
    b = (gxhat * xhat).mean(axis=1, keepdims=True)
    return (gxhat - a - xhat * b) * rstd[:, None]


def softmax_fwd(x):
    """Row softmax of a 2-D array with max subtraction."""
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B*Ho*Wo, C*k*k) patch matrix."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((b, ho, wo, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * k * k)


def col2im(cols, x_shape, k, stride, pad):
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, ho, wo, c, k, k)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def bilinear_sample(img, top, left, crop_h, crop_w, out_h, out_w):
    """Bilinearly resample the box (top, left, crop_h, crop_w) of a (C, H, W)
    image onto an out_h x out_w grid using half-pixel centres and edge clamping."""
    _, h, w = img.shape
    ys = top + (np.arange(out_h) + 0.5) * (crop_h / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (crop_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None]
    wx = (xs - x0).astype(img.dtype)[None, :]
    top_row = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot_row = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top_row * (1 - wy) + bot_row * wy).astype(img.dtype)
