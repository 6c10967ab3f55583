"""Inner loops that dominate runtime: patch extraction for convolution,
max-pooling and bilinear resampling.

Every kernel has a numba implementation and a pure-numpy one. The public
wrappers pick one per call according to :mod:`adlda._accel`. Both paths are
deterministic; they agree to rounding, not necessarily bit for bit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adlda._accel import njit, numba_enabled


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
#
# cols has shape (N * OH * OW, C * kh * kw); the column index is c*kh*kw +
# i*kw + j, matching kernel.reshape(F, -1).


@njit
def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x.shape
    cols = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for j in range(kw):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            cols[row, (ch * kh + i) * kw + j] = x[b, ch, y, xx]
    return cols


@njit
def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for j in range(kw):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            dx[b, ch, y, xx] += cols[row, (ch * kh + i) * kw + j]
    return dx


def _im2col_np(x, kh, kw, stride, pad, oh, ow):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_np(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += c6[..., i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad].copy()
    return dxp


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    oh = conv_output_size(x.shape[2], kh, stride, pad)
    ow = conv_output_size(x.shape[3], kw, stride, pad)
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return _im2col_nb(x, kh, kw, stride, pad, oh, ow)
    return _im2col_np(x, kh, kw, stride, pad, oh, ow)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = np.ascontiguousarray(cols)
    if numba_enabled():
        return _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, oh, ow)
    return _col2im_np(cols, n, c, h, w, kh, kw, stride, pad, oh, ow)


# --------------------------------------------------------------------------
# max-pool, window == stride == k, trailing rows/cols dropped.
# argmax is the position inside the window in scan order; ties -> first.


@njit
def _maxpool_fwd_nb(x, k):
    n, c, h, w = x.shape
    oh = h // k
    ow = w // k
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[b, ch, oy * k, ox * k]
                    best_i = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oy * k + i, ox * k + j]
                            if v > best:
                                best = v
                                best_i = i * k + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = best_i
    return out, arg


@njit
def _maxpool_bwd_nb(dout, arg, h, w, k):
    n, c, oh, ow = dout.shape
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = arg[b, ch, oy, ox]
                    dx[b, ch, oy * k + a // k, ox * k + a % k] += dout[b, ch, oy, ox]
    return dx


def _maxpool_fwd_np(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    win = x[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_bwd_np(dout, arg, h, w, k):
    n, c, oh, ow = dout.shape
    win = np.zeros((n, c, oh, ow, k * k), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    dx[:, :, : oh * k, : ow * k] = win
    return dx


def maxpool_forward(x: np.ndarray, k: int = 2):
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return _maxpool_fwd_nb(x, k)
    return _maxpool_fwd_np(x, k)


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, x_shape, k: int = 2) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    dout = np.ascontiguousarray(dout)
    if numba_enabled():
        return _maxpool_bwd_nb(dout, arg, h, w, k)
    return _maxpool_bwd_np(dout, arg, h, w, k)


# --------------------------------------------------------------------------
# bilinear sampling with zero fill outside the frame


@njit
def _bilinear_nb(img, ys, xs):
    c, h, w = img.shape
    oh, ow = ys.shape
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for r in range(oh):
        for q in range(ow):
            y = ys[r, q]
            x = xs[r, q]
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            wy = y - y0
            wx = x - x0
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            in_y0 = 0 <= y0 < h
            in_y1 = 0 <= y0 + 1 < h
            in_x0 = 0 <= x0 < w
            in_x1 = 0 <= x0 + 1 < w
            for ch in range(c):
                v00 = img[ch, y0, x0] if in_y0 and in_x0 else 0.0
                v01 = img[ch, y0, x0 + 1] if in_y0 and in_x1 else 0.0
                v10 = img[ch, y0 + 1, x0] if in_y1 and in_x0 else 0.0
                v11 = img[ch, y0 + 1, x0 + 1] if in_y1 and in_x1 else 0.0
                out[ch, r, q] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    return out


def _bilinear_np(img, ys, xs):
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        v = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(ok[None], v, 0.0)

    w00 = (1.0 - wy) * (1.0 - wx)
    w01 = (1.0 - wy) * wx
    w10 = wy * (1.0 - wx)
    w11 = wy * wx
    out = w00 * tap(y0, x0) + w01 * tap(y0, x0 + 1) + w10 * tap(y0 + 1, x0) + w11 * tap(y0 + 1, x0 + 1)
    return out.astype(img.dtype)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C x H x W) at fractional coordinates; zero outside."""
    img = np.ascontiguousarray(img)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if numba_enabled():
        return _bilinear_nb(img, ys, xs)
    return _bilinear_np(img, ys, xs)
