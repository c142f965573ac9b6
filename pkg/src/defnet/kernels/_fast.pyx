# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of the reference kernels in ``_ref``.

Same contracts, same tie rules, same edge clipping.  Scalar arithmetic is
performed in the same order per cell as the reference so that pooling
selections agree bit for bit; convolution accumulates in a different order
and may differ from the reference by normal floating point rounding.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef _im2col(double[:, :, ::1] x, int kh, int kw, int stride, int pad,
             int ho, int wo):
    """Patch matrix [cin*kh*kw, ho*wo]; out-of-bounds taps stay zero."""
    cdef int cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cols_arr = np.zeros((cin * kh * kw, ho * wo))
    cdef double[:, ::1] cols = cols_arr
    cdef int c, u, v, yo, xo, r, cc, row, base, xo_lo, xo_hi
    for c in range(cin):
        for u in range(kh):
            for v in range(kw):
                row = (c * kh + u) * kw + v
                for yo in range(ho):
                    r = stride * yo + u - pad
                    if r < 0 or r >= h:
                        continue
                    base = yo * wo
                    xo_lo = 0
                    while stride * xo_lo + v - pad < 0:
                        xo_lo += 1
                    xo_hi = wo
                    while xo_hi > xo_lo and stride * (xo_hi - 1) + v - pad >= wid:
                        xo_hi -= 1
                    cc = stride * xo_lo + v - pad
                    for xo in range(xo_lo, xo_hi):
                        cols[row, base + xo] = x[c, r, cc]
                        cc += stride
    return cols_arr


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[::1] b,
                   int stride, int pad):
    cdef int cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef int out_ch = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if cin != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {w.shape[1]}")
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wid + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive conv output {ho}x{wo} for input {h}x{wid}")
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    w2d = np.asarray(w).reshape(out_ch, cin * kh * kw)
    y = w2d @ cols + np.asarray(b)[:, None]
    return np.ascontiguousarray(y.reshape(out_ch, ho, wo))


def conv2d_backward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                    int stride, int pad, double[:, :, ::1] dy):
    cdef int cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef int out_ch = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    dy2d = np.asarray(dy).reshape(out_ch, ho * wo)
    db_arr = dy2d.sum(axis=1)
    dw_arr = (dy2d @ cols.T).reshape(out_ch, cin, kh, kw)
    dcols_arr = np.ascontiguousarray(
        np.asarray(w).reshape(out_ch, cin * kh * kw).T @ dy2d
    )
    # col2im: scatter-add each patch row back onto the input grid
    dx_arr = np.zeros((cin, h, wid))
    cdef double[:, ::1] dcols = dcols_arr
    cdef double[:, :, ::1] dx = dx_arr
    cdef int c, u, v, yo, xo, r, cc, row, base, xo_lo, xo_hi
    for c in range(cin):
        for u in range(kh):
            for v in range(kw):
                row = (c * kh + u) * kw + v
                for yo in range(ho):
                    r = stride * yo + u - pad
                    if r < 0 or r >= h:
                        continue
                    base = yo * wo
                    xo_lo = 0
                    while stride * xo_lo + v - pad < 0:
                        xo_lo += 1
                    xo_hi = wo
                    while xo_hi > xo_lo and stride * (xo_hi - 1) + v - pad >= wid:
                        xo_hi -= 1
                    cc = stride * xo_lo + v - pad
                    for xo in range(xo_lo, xo_hi):
                        dx[c, r, cc] += dcols[row, base + xo]
                        cc += stride
    return dx_arr, dw_arr, db_arr


def maxpool_forward(double[:, :, ::1] x, int kh, int kw, int sy, int sx):
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    if kh > h or kw > w:
        raise ValueError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    cdef int vo = h // sy, ho = w // sx
    if vo <= 0 or ho <= 0:
        raise ValueError(f"pool stride ({sy},{sx}) yields empty output for input {h}x{w}")
    cdef int off_y = (kh - 1) // 2, off_x = (kw - 1) // 2
    y_arr = np.empty((c, vo, ho))
    arg_arr = np.empty((c, vo, ho), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] arg = arg_arr
    cdef int ch, yo, xo, u, v, r, cc
    cdef int best_r, best_c, found
    cdef double best, val
    for ch in range(c):
        for yo in range(vo):
            for xo in range(ho):
                best = 0.0
                best_r = 0
                best_c = 0
                found = 0
                for u in range(kh):
                    r = sy * yo + u - off_y
                    if r < 0 or r >= h:
                        continue
                    for v in range(kw):
                        cc = sx * xo + v - off_x
                        if cc < 0 or cc >= w:
                            continue
                        val = x[ch, r, cc]
                        if not found or val > best:
                            best = val
                            best_r = r
                            best_c = cc
                            found = 1
                y[ch, yo, xo] = best
                arg[ch, yo, xo] = best_r * w + best_c
    return y_arr, arg_arr


def maxpool_backward(long long[:, :, ::1] arg, double[:, :, ::1] dy, int h, int w):
    cdef int c = dy.shape[0], vo = dy.shape[1], ho = dy.shape[2]
    dx_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] dx = dx_arr
    cdef int ch, yo, xo
    cdef long long a
    for ch in range(c):
        for yo in range(vo):
            for xo in range(ho):
                a = arg[ch, yo, xo]
                dx[ch, a // w, a % w] += dy[ch, yo, xo]
    return dx_arr


def defpool_forward(double[:, ::1] m, double[:, ::1] penalty, int radius, int sy, int sx):
    cdef int v = m.shape[0], h = m.shape[1]
    cdef int vo = v // sy, ho = h // sx
    if vo <= 0 or ho <= 0:
        raise ValueError(f"pool stride ({sy},{sx}) yields empty output for input {v}x{h}")
    out_arr = np.empty((vo, ho))
    win_r_arr = np.empty((vo, ho), dtype=np.int64)
    win_c_arr = np.empty((vo, ho), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[:, ::1] win_r = win_r_arr
    cdef long long[:, ::1] win_c = win_c_arr
    cdef int yo, xo, i, j, r, cc, best_r, best_c, found
    cdef double best, val
    for yo in range(vo):
        for xo in range(ho):
            best = 0.0
            best_r = 0
            best_c = 0
            found = 0
            for i in range(-radius, radius + 1):
                r = sy * yo + i
                if r < 0 or r >= v:
                    continue
                for j in range(-radius, radius + 1):
                    cc = sx * xo + j
                    if cc < 0 or cc >= h:
                        continue
                    val = m[r, cc] - penalty[i + radius, j + radius]
                    if not found or val > best:
                        best = val
                        best_r = r
                        best_c = cc
                        found = 1
            if not found:
                raise ValueError("empty feasible displacement set for some output block")
            out[yo, xo] = best
            win_r[yo, xo] = best_r
            win_c[yo, xo] = best_c
    return out_arr, win_r_arr, win_c_arr


def defpool_backward(long long[:, ::1] win_r, long long[:, ::1] win_c,
                     double[:, ::1] dy, int v, int h):
    cdef int vo = dy.shape[0], ho = dy.shape[1]
    dm_arr = np.zeros((v, h))
    cdef double[:, ::1] dm = dm_arr
    cdef int yo, xo
    for yo in range(vo):
        for xo in range(ho):
            dm[win_r[yo, xo], win_c[yo, xo]] += dy[yo, xo]
    return dm_arr
