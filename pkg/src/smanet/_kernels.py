"""JIT-compiled inner loops for the convolution hot paths.

numba only fuses the gather/scatter loops; all math is defined by the
callers in tensor.py, and every kernel has a pure-numpy twin used when
numba is unavailable.  Loops are sequential with a fixed accumulation
order, so results stay bit-identical run to run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _im2col_jit(xp, k, stride, cols, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    for bc in range(b * c):
        bi = bc // c
        ci = bc % c
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oi in range(ho):
                    base = oi * wo
                    si = oi * stride + ki
                    for oj in range(wo):
                        cols[bi, row, base + oj] = xp[bi, ci, si, oj * stride + kj]


@njit(cache=True)
def _col2im_jit(gcols, k, stride, gxp, ho, wo):
    b, c = gxp.shape[0], gxp.shape[1]
    for bc in range(b * c):
        bi = bc // c
        ci = bc % c
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oi in range(ho):
                    base = oi * wo
                    si = oi * stride + ki
                    for oj in range(wo):
                        gxp[bi, ci, si, oj * stride + kj] += gcols[bi, row, base + oj]


@njit(cache=True)
def _depthwise_fwd_jit(xp, w, out):
    b, n, ho, wo = out.shape
    k = w.shape[1]
    for bn in range(b * n):
        bi = bn // n
        ni = bn % n
        for ki in range(k):
            for kj in range(k):
                wv = w[ni, ki, kj]
                for oi in range(ho):
                    for oj in range(wo):
                        out[bi, ni, oi, oj] += wv * xp[bi, ni, oi + ki, oj + kj]


@njit(cache=True)
def _depthwise_dx_jit(g, w, gxp):
    b, n, ho, wo = g.shape
    k = w.shape[1]
    for bn in range(b * n):
        bi = bn // n
        ni = bn % n
        for ki in range(k):
            for kj in range(k):
                wv = w[ni, ki, kj]
                for oi in range(ho):
                    for oj in range(wo):
                        gxp[bi, ni, oi + ki, oj + kj] += wv * g[bi, ni, oi, oj]


@njit(cache=True)
def _depthwise_dw_jit(xp, g, gw):
    # Per-column accumulator first (vectorizable elementwise adds), then a
    # sequential reduction: fixed order for every (n, ki, kj) output.
    b, n, ho, wo = g.shape
    k = gw.shape[1]
    for ni in range(n):
        row = np.empty(wo, dtype=np.float64)
        for ki in range(k):
            for kj in range(k):
                for oj in range(wo):
                    row[oj] = 0.0
                for bi in range(b):
                    for oi in range(ho):
                        for oj in range(wo):
                            row[oj] += xp[bi, ni, oi + ki, oj + kj] * g[bi, ni, oi, oj]
                acc = 0.0
                for oj in range(wo):
                    acc += row[oj]
                gw[ni, ki, kj] = acc


def im2col(xp: np.ndarray, k: int, stride: int):
    b, c = xp.shape[:2]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    if HAVE_NUMBA:
        cols = np.empty((b, c * k * k, ho * wo), dtype=xp.dtype)
        _im2col_jit(xp, k, stride, cols, ho, wo)
        return cols, ho, wo
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(view.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def col2im(gcols: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int, ho: int, wo: int):
    b = gcols.shape[0]
    if HAVE_NUMBA:
        gxp = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
        _col2im_jit(gcols, k, stride, gxp, ho, wo)
        return gxp
    ch = np.repeat(np.arange(c), k * k)
    ki = np.tile(np.repeat(np.arange(k), k), c)
    kj = np.tile(np.arange(k), c * k)
    oi = stride * np.repeat(np.arange(ho), wo)
    oj = stride * np.tile(np.arange(wo), ho)
    rows = ki[:, None] + oi[None, :]
    cols_j = kj[:, None] + oj[None, :]
    idx = (ch[:, None] * hp + rows) * wp + cols_j
    size = c * hp * wp
    big = idx[None, :, :] + (np.arange(b) * size)[:, None, None]
    flat = np.bincount(big.ravel(), weights=gcols.ravel(), minlength=b * size)
    return flat.reshape(b, c, hp, wp).astype(gcols.dtype, copy=False)


def depthwise_forward(xp: np.ndarray, w: np.ndarray, ho: int, wo: int) -> np.ndarray:
    b, n = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((b, n, ho, wo), dtype=xp.dtype)
    if HAVE_NUMBA:
        _depthwise_fwd_jit(xp, w, out)
        return out
    for i in range(k):
        for j in range(k):
            out += w[:, i, j][:, None, None] * xp[:, :, i : i + ho, j : j + wo]
    return out


def depthwise_dx(g: np.ndarray, w: np.ndarray, hp: int, wp: int) -> np.ndarray:
    b, n, ho, wo = g.shape
    k = w.shape[1]
    gxp = np.zeros((b, n, hp, wp), dtype=g.dtype)
    if HAVE_NUMBA:
        _depthwise_dx_jit(g, w, gxp)
        return gxp
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + ho, j : j + wo] += w[:, i, j][:, None, None] * g
    return gxp


def depthwise_dw(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    if HAVE_NUMBA:
        gw = np.empty((g.shape[1], k, k), dtype=np.float64)
        _depthwise_dw_jit(xp, g, gw)
        return gw
    ho, wo = g.shape[2:]
    windows = sliding_window_view(xp, (ho, wo), axis=(2, 3))
    return np.einsum("bnijhw,bnhw->nij", windows, g, optimize=True)
