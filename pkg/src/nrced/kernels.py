"""Hot numeric kernels: 2-D convolution, 2x2 max pooling and the Adam update.

Each kernel exists twice: a ``*_nb`` loop version compiled by numba and a
``*_np`` version written with vectorised numpy.  The public names dispatch on
:data:`nrced._accel.USE_NUMBA`; both versions are importable so tests and the
benchmark can compare them directly.

Convolutions are stride 1 with "same" zero padding and odd kernel sizes.
Layouts follow the usual NCHW convention, conv weights are ``(out, in, kh, kw)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit


def _check_kernel(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {(kh, kw)}")


# ---------------------------------------------------------------- numpy path


def _windows(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))


def conv2d_forward_np(x, w, b):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw)  # (N, C, H, W, kh, kw)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, O)
    y = np.moveaxis(y, 3, 1)
    return np.ascontiguousarray(y + b[None, :, None, None])


def conv2d_grad_input_np(dy, w):
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward_np(dy, flipped, np.zeros(flipped.shape[0], dtype=dy.dtype))


def conv2d_grad_weight_np(x, dy, kh, kw):
    win = _windows(x, kh, kw)
    return np.ascontiguousarray(np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])))


def maxpool2x2_forward_np(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool2x2_backward_np(dy, idx):
    n, c, h2, w2 = dy.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    dx = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, 2 * h2, 2 * w2))


def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- numba path


@njit
def _im2col_nb(x, kh, kw):
    """Rows are output positions ``(n, i, j)``, columns ``(c, a, q)`` taps."""
    n_b, n_c, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    cols = np.zeros((n_b * h * wd, n_c * kh * kw), dtype=x.dtype)
    for n in range(n_b):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for c in range(n_c):
                    for a in range(kh):
                        ii = i + a - ph
                        if ii < 0 or ii >= h:
                            continue
                        for q in range(kw):
                            jj = j + q - pw
                            if 0 <= jj < wd:
                                cols[r, (c * kh + a) * kw + q] = x[n, c, ii, jj]
    return cols


@njit
def _rows_to_nchw_nb(rows, n_b, h, wd):
    n_o = rows.shape[1]
    y = np.empty((n_b, n_o, h, wd), dtype=rows.dtype)
    for n in range(n_b):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for o in range(n_o):
                    y[n, o, i, j] = rows[r, o]
    return y


@njit
def _nchw_to_rows_nb(y):
    n_b, n_o, h, wd = y.shape
    rows = np.empty((n_b * h * wd, n_o), dtype=y.dtype)
    for n in range(n_b):
        for o in range(n_o):
            for i in range(h):
                for j in range(wd):
                    rows[(n * h + i) * wd + j, o] = y[n, o, i, j]
    return rows


@njit
def conv2d_forward_nb(x, w, b):
    n_b, _, h, wd = x.shape
    n_o, n_c, kh, kw = w.shape
    cols = _im2col_nb(x, kh, kw)
    wmat = np.ascontiguousarray(w).reshape(n_o, n_c * kh * kw)
    rows = np.dot(cols, wmat.T)
    for o in range(n_o):
        rows[:, o] += b[o]
    return _rows_to_nchw_nb(rows, n_b, h, wd)


@njit
def conv2d_grad_input_nb(dy, w):
    n_b, n_o, h, wd = dy.shape
    _, n_c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    wmat = np.ascontiguousarray(w).reshape(n_o, n_c * kh * kw)
    dcols = np.dot(_nchw_to_rows_nb(dy), wmat)
    dx = np.zeros((n_b, n_c, h, wd), dtype=dy.dtype)
    for n in range(n_b):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for c in range(n_c):
                    for a in range(kh):
                        ii = i + a - ph
                        if ii < 0 or ii >= h:
                            continue
                        for q in range(kw):
                            jj = j + q - pw
                            if 0 <= jj < wd:
                                dx[n, c, ii, jj] += dcols[r, (c * kh + a) * kw + q]
    return dx


@njit
def conv2d_grad_weight_nb(x, dy, kh, kw):
    n_c = x.shape[1]
    n_o = dy.shape[1]
    cols = _im2col_nb(x, kh, kw)
    dw = np.dot(_nchw_to_rows_nb(dy).T, cols)
    return dw.reshape(n_o, n_c, kh, kw)


@njit
def maxpool2x2_forward_nb(x):
    n_b, n_c, h, wd = x.shape
    h2, w2 = h // 2, wd // 2
    y = np.empty((n_b, n_c, h2, w2), dtype=x.dtype)
    idx = np.empty((n_b, n_c, h2, w2), dtype=np.int64)
    for n in range(n_b):
        for c in range(n_c):
            for i in range(h2):
                for j in range(w2):
                    best = x[n, c, 2 * i, 2 * j]
                    k = 0
                    for s in range(1, 4):
                        val = x[n, c, 2 * i + s // 2, 2 * j + s % 2]
                        if val > best:
                            best = val
                            k = s
                    y[n, c, i, j] = best
                    idx[n, c, i, j] = k
    return y, idx


@njit
def maxpool2x2_backward_nb(dy, idx):
    n_b, n_c, h2, w2 = dy.shape
    dx = np.zeros((n_b, n_c, 2 * h2, 2 * w2), dtype=dy.dtype)
    for n in range(n_b):
        for c in range(n_c):
            for i in range(h2):
                for j in range(w2):
                    k = idx[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dy[n, c, i, j]
    return dx


@njit
def _adam_flat(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    _adam_flat(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
               lr, beta1, beta2, eps, c1, c2)


# ---------------------------------------------------------------- dispatch


def conv2d_forward(x, w, b):
    _check_kernel(*w.shape[2:])
    if _accel.USE_NUMBA:
        return conv2d_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w),
                                 np.ascontiguousarray(b))
    return conv2d_forward_np(x, w, b)


def conv2d_grad_input(dy, w):
    if _accel.USE_NUMBA:
        return conv2d_grad_input_nb(np.ascontiguousarray(dy), np.ascontiguousarray(w))
    return conv2d_grad_input_np(dy, w)


def conv2d_grad_weight(x, dy, kh, kw):
    if _accel.USE_NUMBA:
        return conv2d_grad_weight_nb(np.ascontiguousarray(x), np.ascontiguousarray(dy), kh, kw)
    return conv2d_grad_weight_np(x, dy, kh, kw)


def maxpool2x2_forward(x):
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max pooling needs even spatial size, got {x.shape[2:]}")
    if _accel.USE_NUMBA:
        return maxpool2x2_forward_nb(np.ascontiguousarray(x))
    return maxpool2x2_forward_np(x)


def maxpool2x2_backward(dy, idx):
    if _accel.USE_NUMBA:
        return maxpool2x2_backward_nb(np.ascontiguousarray(dy), np.ascontiguousarray(idx))
    return maxpool2x2_backward_np(dy, idx)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam step on contiguous float arrays."""
    if _accel.USE_NUMBA:
        adam_update_nb(p, np.ascontiguousarray(g), m, v, lr, beta1, beta2, eps, t)
    else:
        adam_update_np(p, g, m, v, lr, beta1, beta2, eps, t)
