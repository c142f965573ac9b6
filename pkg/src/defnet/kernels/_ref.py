"""Pure NumPy reference implementation of the hot kernels.

Semantics shared with the compiled twin in ``_fast``:

* ``conv2d`` is cross-correlation (no kernel flip) with zero padding and
  top-left anchored windows, ``out = (in + 2*pad - k) // stride + 1``.
* ``maxpool`` windows are anchored so that the cell ``stride * out_index``
  sits at the window center (offset ``(k - 1) // 2`` from the window start);
  cells outside the input are excluded from the max.  Output size is
  ``floor(in / stride)``.  The first maximum in row-major window order wins.
* ``defpool`` scans displacements ``(-radius .. radius)`` around the block
  center ``(stride_y * y, stride_x * x)``, subtracting ``penalty[i, j]``
  from the map value at each displaced cell before taking the max.  With an
  all-zero penalty it reduces exactly, bit for bit, to ``maxpool`` with
  kernel ``2 * radius + 1``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b, stride, pad):
    cin, h, wid = x.shape
    out_ch, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {cin_w}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive conv output {ho}x{wo} for input {h}x{wid}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    y = np.tensordot(win, w, axes=([0, 3, 4], [1, 2, 3]))  # [ho, wo, out_ch]
    return np.ascontiguousarray(y.transpose(2, 0, 1)) + b[:, None, None]


def conv2d_backward(x, w, stride, pad, dy):
    cin, h, wid = x.shape
    out_ch, _, kh, kw = w.shape
    _, ho, wo = dy.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    dw = np.tensordot(dy, win, axes=([1, 2], [1, 2]))  # [out_ch, cin, kh, kw]
    db = dy.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            patch = np.tensordot(w[:, :, u, v], dy, axes=([0], [0]))  # [cin, ho, wo]
            dxp[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += patch
    dx = dxp[:, pad : pad + h, pad : pad + wid] if pad else dxp
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def _pooled_windows(x2d_stack, kh, kw, sy, sx, off_y, off_x, fill):
    """Clipped strided windows of a [C, H, W] stack, padded with `fill`."""
    c, h, w = x2d_stack.shape
    vo, ho = h // sy, w // sx
    if vo <= 0 or ho <= 0:
        raise ValueError(f"pool stride ({sy},{sx}) yields empty output for input {h}x{w}")
    pad_b = max(0, sy * (vo - 1) - off_y + kh - 1 - (h - 1))
    pad_r = max(0, sx * (ho - 1) - off_x + kw - 1 - (w - 1))
    xp = np.pad(
        x2d_stack,
        ((0, 0), (off_y, pad_b), (off_x, pad_r)),
        constant_values=fill,
    )
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sy, ::sx]
    return win[:, :vo, :ho], vo, ho


def maxpool_forward(x, kh, kw, sy, sx):
    c, h, w = x.shape
    if kh > h or kw > w:
        raise ValueError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    off_y, off_x = (kh - 1) // 2, (kw - 1) // 2
    win, vo, ho = _pooled_windows(x, kh, kw, sy, sx, off_y, off_x, -np.inf)
    flat = win.reshape(c, vo, ho, kh * kw)
    loc = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, loc[..., None], axis=-1)[..., 0]
    rows = sy * np.arange(vo)[None, :, None] + loc // kw - off_y
    cols = sx * np.arange(ho)[None, None, :] + loc % kw - off_x
    arg = rows * w + cols
    return np.ascontiguousarray(y), np.ascontiguousarray(arg)


def maxpool_backward(arg, dy, h, w):
    c = dy.shape[0]
    dx = np.zeros((c, h * w))
    ch = np.repeat(np.arange(c), arg[0].size)
    np.add.at(dx, (ch, arg.reshape(c, -1).ravel()), dy.reshape(c, -1).ravel())
    return dx.reshape(c, h, w)


def defpool_forward(m, penalty, radius, sy, sx):
    v, h = m.shape
    s = 2 * radius + 1
    win, vo, ho = _pooled_windows(m[None], s, s, sy, sx, radius, radius, -np.inf)
    scores = win[0] - penalty[None, None]
    flat = scores.reshape(vo, ho, s * s)
    loc = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, loc[..., None], axis=-1)[..., 0]
    if not np.isfinite(out).all():
        raise ValueError("empty feasible displacement set for some output block")
    win_r = sy * np.arange(vo)[:, None] + loc // s - radius
    win_c = sx * np.arange(ho)[None, :] + loc % s - radius
    return np.ascontiguousarray(out), np.ascontiguousarray(win_r), np.ascontiguousarray(win_c)


def defpool_backward(win_r, win_c, dy, v, h):
    dm = np.zeros((v, h))
    np.add.at(dm, (win_r.ravel(), win_c.ravel()), dy.ravel())
    return dm
