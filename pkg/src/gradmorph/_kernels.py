"""Hot numeric kernels: 2-D convolution (forward and both gradients) and 2x2 max pooling.

Two implementations of every kernel exist. The numba path runs direct
``@njit`` loops on wide feature maps, where a row of output stays in cache,
and switches to patch extraction (``im2col``) plus a BLAS matrix product on
narrow, deep maps where short rows defeat vectorization. The pure-numpy path
always uses ``sliding_window_view`` patches plus BLAS. The active path is
chosen at import from the ``GRADMORPH_BACKEND`` environment variable
(``numba`` or ``numpy``); when unset, numba is used if it imports.
``set_backend`` switches at runtime.

Layouts: images ``[N, C, H, W]`` float64, inputs already zero padded by the
caller; kernels ``[Co, Ci, kh, kw]``; convolution is cross-correlation. A
column matrix is ``[C*kh*kw, N*Ho*Wo]`` with row ``(c*kh + ky)*kw + kx`` and
column ``(n*Ho + y)*Wo + x``.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------- numpy path


def im2col_np(xp, kh, kw):
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im_np(cols, n, c, hp, wp, kh, kw):
    ho, wo = hp - kh + 1, wp - kw + 1
    blocks = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp))
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky:ky + ho, kx:kx + wo] += blocks[:, ky, kx].transpose(1, 0, 2, 3)
    return out


def conv2d_valid_np(xp, w, b):
    n, _, hp, wp = xp.shape
    co, _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    out = (w.reshape(co, -1) @ im2col_np(xp, kh, kw)).reshape(co, n, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + b[None, :, None, None]


def conv2d_grad_input_np(g, w):
    """Gradient w.r.t. the padded input, ``[N, Ci, Ho+kh-1, Wo+kw-1]``."""
    n, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
    return col2im_np(w.reshape(co, -1).T @ g2, n, ci, ho + kh - 1, wo + kw - 1, kh, kw)


def conv2d_grad_weight_np(g, xp, kh, kw):
    co = g.shape[1]
    g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
    return (g2 @ im2col_np(xp, kh, kw).T).reshape(co, xp.shape[1], kh, kw)


def maxpool2_np(x):
    """2x2 / stride-2 max pool. Returns ``(out, argmax within window in 0..3)``."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # first occurrence == lowest flat index
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def maxpool2_grad_np(g, idx):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * ho, 2 * wo))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True, error_model="numpy")
    def _conv_direct(xp, w, b):
        n_, ci_, hp, wp = xp.shape
        co_, _, kh, kw = w.shape
        ho = hp - kh + 1
        wo = wp - kw + 1
        out = np.empty((n_, co_, ho, wo))
        for n in range(n_):
            for y in range(ho):
                for co in range(co_):
                    r = out[n, co, y]
                    r[:] = b[co]
                    for ci in range(ci_):
                        for ky in range(kh):
                            srow = xp[n, ci, y + ky]
                            if kw == 3:
                                # three taps fused: one pass over the row
                                w0 = w[co, ci, ky, 0]
                                w1 = w[co, ci, ky, 1]
                                w2 = w[co, ci, ky, 2]
                                for x in range(wo):
                                    r[x] += w0 * srow[x] + w1 * srow[x + 1] + w2 * srow[x + 2]
                            else:
                                for kx in range(kw):
                                    wv = w[co, ci, ky, kx]
                                    for x in range(wo):
                                        r[x] += wv * srow[x + kx]
        return out

    @njit(cache=True, fastmath=True, error_model="numpy")
    def _conv_grad_weight_direct(g, xp, kh, kw):
        n_, co_, ho, wo = g.shape
        ci_ = xp.shape[1]
        out = np.zeros((co_, ci_, kh, kw))
        for n in range(n_):
            for co in range(co_):
                for ci in range(ci_):
                    for y in range(ho):
                        grow = g[n, co, y]
                        for ky in range(kh):
                            srow = xp[n, ci, y + ky]
                            if kw == 3:
                                s0 = 0.0
                                s1 = 0.0
                                s2 = 0.0
                                for x in range(wo):
                                    gv = grow[x]
                                    s0 += gv * srow[x]
                                    s1 += gv * srow[x + 1]
                                    s2 += gv * srow[x + 2]
                                out[co, ci, ky, 0] += s0
                                out[co, ci, ky, 1] += s1
                                out[co, ci, ky, 2] += s2
                            else:
                                for kx in range(kw):
                                    s = 0.0
                                    for x in range(wo):
                                        s += grow[x] * srow[x + kx]
                                    out[co, ci, ky, kx] += s
        return out

    @njit(cache=True)
    def im2col_nb(xp, kh, kw):
        n_, c_, hp, wp = xp.shape
        ho = hp - kh + 1
        wo = wp - kw + 1
        cols = np.empty((c_ * kh * kw, n_ * ho * wo))
        for c in range(c_):
            for ky in range(kh):
                for kx in range(kw):
                    row = cols[(c * kh + ky) * kw + kx]
                    for n in range(n_):
                        src = xp[n, c]
                        for y in range(ho):
                            base = (n * ho + y) * wo
                            srow = src[y + ky]
                            for x in range(wo):
                                row[base + x] = srow[x + kx]
        return cols

    @njit(cache=True)
    def col2im_nb(cols, n_, c_, hp, wp, kh, kw):
        ho = hp - kh + 1
        wo = wp - kw + 1
        out = np.zeros((n_, c_, hp, wp))
        for c in range(c_):
            for ky in range(kh):
                for kx in range(kw):
                    row = cols[(c * kh + ky) * kw + kx]
                    for n in range(n_):
                        dst = out[n, c]
                        for y in range(ho):
                            base = (n * ho + y) * wo
                            drow = dst[y + ky]
                            for x in range(wo):
                                drow[x + kx] += row[base + x]
        return out

    @njit(cache=True)
    def maxpool2_nb(a):
        n_, c_, h, w = a.shape
        ho = h // 2
        wo = w // 2
        out = np.empty((n_, c_, ho, wo))
        idx = np.empty((n_, c_, ho, wo), dtype=np.int64)
        for n in range(n_):
            for c in range(c_):
                for y in range(ho):
                    for x in range(wo):
                        best = a[n, c, 2 * y, 2 * x]
                        bi = 0
                        for k in range(1, 4):
                            v = a[n, c, 2 * y + k // 2, 2 * x + k % 2]
                            if v > best:
                                best = v
                                bi = k
                        out[n, c, y, x] = best
                        idx[n, c, y, x] = bi
        return out, idx

    @njit(cache=True)
    def maxpool2_grad_nb(g, idx):
        n_, c_, ho, wo = g.shape
        out = np.zeros((n_, c_, 2 * ho, 2 * wo))
        for n in range(n_):
            for c in range(c_):
                for y in range(ho):
                    for x in range(wo):
                        k = idx[n, c, y, x]
                        out[n, c, 2 * y + k // 2, 2 * x + k % 2] = g[n, c, y, x]
        return out


    DIRECT_MIN_WIDTH = 24

    def conv2d_valid_nb(xp, w, b):
        kh, kw = w.shape[2], w.shape[3]
        if xp.shape[3] - kw + 1 >= DIRECT_MIN_WIDTH:
            return _conv_direct(xp, w, b)
        n, _, hp, wp = xp.shape
        co = w.shape[0]
        ho, wo = hp - kh + 1, wp - kw + 1
        out = (w.reshape(co, -1) @ im2col_nb(xp, kh, kw)).reshape(co, n, ho, wo)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + b[None, :, None, None]

    def conv2d_grad_input_nb(g, w):
        if g.shape[3] >= DIRECT_MIN_WIDTH:
            # full correlation with the flipped, channel-transposed kernel
            kh, kw = w.shape[2], w.shape[3]
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            return _conv_direct(gp, wt, np.zeros(wt.shape[0]))
        n, co, ho, wo = g.shape
        _, ci, kh, kw = w.shape
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        cols = np.ascontiguousarray(w.reshape(co, -1).T @ g2)
        return col2im_nb(cols, n, ci, ho + kh - 1, wo + kw - 1, kh, kw)

    def conv2d_grad_weight_nb(g, xp, kh, kw):
        if g.shape[3] >= DIRECT_MIN_WIDTH:
            return _conv_grad_weight_direct(g, xp, kh, kw)
        co = g.shape[1]
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        return (g2 @ im2col_nb(xp, kh, kw).T).reshape(co, xp.shape[1], kh, kw)


# ---------------------------------------------------------------- dispatch

_NUMPY = {
    "conv2d_valid": conv2d_valid_np,
    "conv2d_grad_input": conv2d_grad_input_np,
    "conv2d_grad_weight": conv2d_grad_weight_np,
    "maxpool2": maxpool2_np,
    "maxpool2_grad": maxpool2_grad_np,
}

if HAVE_NUMBA:
    _NUMBA = {
        "conv2d_valid": conv2d_valid_nb,
        "conv2d_grad_input": conv2d_grad_input_nb,
        "conv2d_grad_weight": conv2d_grad_weight_nb,
        "maxpool2": maxpool2_nb,
        "maxpool2_grad": maxpool2_grad_nb,
    }
else:  # pragma: no cover
    _NUMBA = {}

BACKENDS = ("numba", "numpy")
_active: dict = {}
backend = ""


def set_backend(name: str) -> None:
    """Select the kernel implementation used by the autodiff ops."""
    global backend
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _active.clear()
    _active.update(_NUMBA if name == "numba" else _NUMPY)
    backend = name


def kernels_for(name: str) -> dict:
    return dict(_NUMBA if name == "numba" else _NUMPY)


def get(name: str):
    return _active[name]


set_backend(os.environ.get("GRADMORPH_BACKEND", "numba" if HAVE_NUMBA else "numpy"))
