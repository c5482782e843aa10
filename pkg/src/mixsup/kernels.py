"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public kernel except the resize dispatches on
:data:`mixsup._accel.USE_NUMBA`.  Both implementations are importable under
``_<name>_numpy`` / ``_<name>_numba`` so tests and the benchmark can compare
them directly.  The resize always takes the matmul path: for the small maps
used here BLAS beats the numba gather loop (see benchmarks/bench_kernels.py),
which is kept as an independent cross-check.

Array layout is NCHW for convolution helpers and ``(..., H, W)`` for the
resize helpers.  Convolution and resize kernels keep float32 or float64
inputs in their own precision (anything else is promoted to float64); the
mask-to-box kernels always work in float64.
"""

from functools import lru_cache

import numpy as np

from . import _accel
from ._accel import njit


def _floating(x):
    x = np.asarray(x)
    if x.dtype == np.float32 or x.dtype == np.float64:
        return x
    return x.astype(np.float64)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ----------------------------------------------------------------------------
# im2col / col2im
# ----------------------------------------------------------------------------

def _im2col_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im_numpy(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w]


@njit
def _im2col_numba(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((n, c * k * k, ho * wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            cols[b, row, oy * wo + ox] = x[b, ch, y, xx]
    return cols


@njit
def _col2im_numba_impl(cols, n, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            dx[b, ch, y, xx] += cols[b, row, oy * wo + ox]
    return dx


def _col2im_numba(cols, shape, k, stride, pad):
    n, c, h, w = shape
    return _col2im_numba_impl(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad)


def im2col(x, k, stride, pad):
    """Unfold ``x`` (N, C, H, W) into (N, C*k*k, Ho*Wo) patch columns."""
    x = np.ascontiguousarray(_floating(x))
    if _accel.USE_NUMBA:
        return _im2col_numba(x, k, stride, pad)
    return _im2col_numpy(x, k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an image grid."""
    if _accel.USE_NUMBA:
        return _col2im_numba(cols, shape, k, stride, pad)
    return _col2im_numpy(cols, shape, k, stride, pad)


# ----------------------------------------------------------------------------
# bilinear resize (half-pixel centers, edge clamped, no antialiasing)
# ----------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _bilinear_taps(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    w1[i0 == n_in - 1] = 0.0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bilinear interpolation matrix along one axis."""
    i0, i1, w0, w1 = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), w0)
    np.add.at(m, (rows, i1), w1)
    m.setflags(write=False)
    return m


def _resize_numpy(x, out_h, out_w):
    ry = interp_matrix(x.shape[-2], out_h).astype(x.dtype, copy=False)
    rx = interp_matrix(x.shape[-1], out_w).astype(x.dtype, copy=False)
    return ry @ x @ rx.T


def _resize_backward_numpy(g, in_h, in_w):
    ry = interp_matrix(in_h, g.shape[-2]).astype(g.dtype, copy=False)
    rx = interp_matrix(in_w, g.shape[-1]).astype(g.dtype, copy=False)
    return ry.T @ g @ rx


@njit
def _resize_numba_impl(x, yi0, yi1, yw0, yw1, xi0, xi1, xw0, xw1):
    b = x.shape[0]
    oh = yi0.shape[0]
    ow = xi0.shape[0]
    out = np.empty((b, oh, ow), dtype=x.dtype)
    for n in range(b):
        for oy in range(oh):
            r0 = yi0[oy]
            r1 = yi1[oy]
            a0 = yw0[oy]
            a1 = yw1[oy]
            for ox in range(ow):
                c0 = xi0[ox]
                c1 = xi1[ox]
                out[n, oy, ox] = (
                    a0 * (xw0[ox] * x[n, r0, c0] + xw1[ox] * x[n, r0, c1])
                    + a1 * (xw0[ox] * x[n, r1, c0] + xw1[ox] * x[n, r1, c1])
                )
    return out


@njit
def _resize_backward_numba_impl(g, in_h, in_w, yi0, yi1, yw0, yw1, xi0, xi1, xw0, xw1):
    b, oh, ow = g.shape
    dx = np.zeros((b, in_h, in_w), dtype=g.dtype)
    for n in range(b):
        for oy in range(oh):
            r0 = yi0[oy]
            r1 = yi1[oy]
            a0 = yw0[oy]
            a1 = yw1[oy]
            for ox in range(ow):
                v = g[n, oy, ox]
                c0 = xi0[ox]
                c1 = xi1[ox]
                dx[n, r0, c0] += a0 * xw0[ox] * v
                dx[n, r0, c1] += a0 * xw1[ox] * v
                dx[n, r1, c0] += a1 * xw0[ox] * v
                dx[n, r1, c1] += a1 * xw1[ox] * v
    return dx


def _typed_taps(n_in, n_out, dtype):
    # weights in the data's precision so the loop stays single-precision for float32
    i0, i1, w0, w1 = _bilinear_taps(n_in, n_out)
    return i0, i1, w0.astype(dtype, copy=False), w1.astype(dtype, copy=False)


def _resize_numba(x, out_h, out_w):
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]))
    out = _resize_numba_impl(flat, *_typed_taps(x.shape[-2], out_h, x.dtype),
                             *_typed_taps(x.shape[-1], out_w, x.dtype))
    return out.reshape(lead + (out_h, out_w))


def _resize_backward_numba(g, in_h, in_w):
    lead = g.shape[:-2]
    flat = np.ascontiguousarray(g.reshape((-1,) + g.shape[-2:]))
    dx = _resize_backward_numba_impl(flat, in_h, in_w, *_typed_taps(in_h, g.shape[-2], g.dtype),
                                     *_typed_taps(in_w, g.shape[-1], g.dtype))
    return dx.reshape(lead + (in_h, in_w))


def resize_bilinear(x, out_h: int, out_w: int):
    """Bilinearly resize the last two axes of ``x`` to ``(out_h, out_w)``."""
    x = _floating(x)
    if x.shape[-2:] == (out_h, out_w):
        return x.copy()
    return _resize_numpy(x, out_h, out_w)


def resize_bilinear_backward(g, in_h: int, in_w: int):
    """Vector-Jacobian product of :func:`resize_bilinear`."""
    g = _floating(g)
    if g.shape[-2:] == (in_h, in_w):
        return g.copy()
    return _resize_backward_numpy(g, in_h, in_w)


# ----------------------------------------------------------------------------
# mask-to-box projection
# ----------------------------------------------------------------------------
# Ties between a row maximum and a column maximum are resolved towards the row
# projection; ties inside a row/column go to the first arg-max.

def _m2b_forward_numpy(p):
    row_arg = np.argmax(p, axis=1)
    col_arg = np.argmax(p, axis=0)
    r = p[np.arange(p.shape[0]), row_arg]
    c = p[col_arg, np.arange(p.shape[1])]
    take_row = r[:, None] <= c[None, :]
    b = np.where(take_row, r[:, None], c[None, :])
    return b, row_arg, col_arg, take_row


def _m2b_backward_numpy(g, row_arg, col_arg, take_row):
    h, w = g.shape
    gr = np.where(take_row, g, 0.0).sum(axis=1)
    gc = np.where(take_row, 0.0, g).sum(axis=0)
    gp = np.zeros((h, w))
    np.add.at(gp, (np.arange(h), row_arg), gr)
    np.add.at(gp, (col_arg, np.arange(w)), gc)
    return gp


@njit
def _m2b_forward_numba(p):
    h, w = p.shape
    row_arg = np.zeros(h, dtype=np.int64)
    col_arg = np.zeros(w, dtype=np.int64)
    r = np.empty(h)
    c = np.empty(w)
    for i in range(h):
        best = p[i, 0]
        for j in range(1, w):
            if p[i, j] > best:
                best = p[i, j]
                row_arg[i] = j
        r[i] = best
    for j in range(w):
        best = p[0, j]
        for i in range(1, h):
            if p[i, j] > best:
                best = p[i, j]
                col_arg[j] = i
        c[j] = best
    b = np.empty((h, w))
    take_row = np.empty((h, w), dtype=np.bool_)
    for i in range(h):
        for j in range(w):
            if r[i] <= c[j]:
                b[i, j] = r[i]
                take_row[i, j] = True
            else:
                b[i, j] = c[j]
                take_row[i, j] = False
    return b, row_arg, col_arg, take_row


@njit
def _m2b_backward_numba(g, row_arg, col_arg, take_row):
    h, w = g.shape
    gp = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if take_row[i, j]:
                gp[i, row_arg[i]] += g[i, j]
            else:
                gp[col_arg[j], j] += g[i, j]
    return gp


def m2b_forward(p):
    """Row/column max projection then min back-projection of a 2-D map.

    Returns ``(box_map, row_arg, col_arg, take_row)``; the last three are the
    routing needed by :func:`m2b_backward`.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _m2b_forward_numba(p)
    return _m2b_forward_numpy(p)


def m2b_backward(g, row_arg, col_arg, take_row):
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _m2b_backward_numba(g, row_arg, col_arg, take_row)
    return _m2b_backward_numpy(g, row_arg, col_arg, take_row)
