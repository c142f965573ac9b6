"""Deformation-constrained pooling.

Each output block takes the max, over displacements (i, j) in a
(2R+1)x(2R+1) window centered on the block, of the map value minus a
learned deformation penalty sum_n c_n * d_n[i, j].  With all c_n = 0 this
is exactly max-pooling; with a single output block and quadratic basis it
is exactly the classic part-model deformation score, and this module also
ships the brute-force oracle for that case plus the parameter mapping
between the two forms.

Displacements landing outside the map are excluded from the max (same as
padding with -inf), ties go to the first candidate in row-major (i, j)
order, and "not allowed to move" is expressed with a 1e9 penalty sentinel.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

INF_COST = 1e9


@dataclass
class DefPoolParams:
    """Geometry plus learnable deformation parameters for one pooling layer.

    radius: block half-width R; stride_y/stride_x: block strides; c: [N]
    coefficients; d: [N, 2R+1, 2R+1] basis maps; basis_frozen: skip the
    basis gradient when True.
    """

    radius: int
    stride_y: int
    stride_x: int
    c: np.ndarray
    d: np.ndarray
    basis_frozen: bool = False

    def __post_init__(self):
        if self.radius < 1 or self.stride_y < 1 or self.stride_x < 1:
            raise ValueError("radius and strides must be positive")
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        self.d = np.asarray(self.d, dtype=np.float64)
        side = 2 * self.radius + 1
        if self.d.shape != (self.c.size, side, side):
            raise ValueError(
                f"basis shape {self.d.shape} != ({self.c.size}, {side}, {side})"
            )
        if not (np.isfinite(self.c).all() and np.isfinite(self.d).all()):
            raise ValueError("coefficients and basis must be finite")

    def penalty(self):
        """The combined per-displacement cost sum_n c_n * d_n, shape [2R+1, 2R+1]."""
        return np.ascontiguousarray(np.tensordot(self.c, self.d, axes=(0, 0)))


def defpool_forward(m, params):
    """Pool a [V, H] map into [floor(V/sy), floor(H/sx)] deformation scores.

    Returns ``(out, cache)``; the cache carries the winning absolute
    coordinates per block for the backward pass.
    """
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"map must be 2-d, got shape {m.shape}")
    out, win_r, win_c = kernels.defpool_forward(
        m, params.penalty(), params.radius, params.stride_y, params.stride_x
    )
    return np.asarray(out), (np.asarray(win_r), np.asarray(win_c), m.shape)


def defpool_backward(upstream, cache, params):
    """Gradients (dM, dc, dd) of the pooled output; dd is None when frozen.

    Per block with winner (i*, j*): the map gradient lands on that cell, the
    coefficient gradient is -d_n[i*, j*] * upstream, and the basis gradient
    is -c_n * upstream at [n, i*, j*].
    """
    win_r, win_c, (v, h) = cache
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != win_r.shape:
        raise ValueError(f"upstream shape {upstream.shape} != {win_r.shape}")
    dm = np.asarray(kernels.defpool_backward(win_r, win_c, upstream, v, h))
    vo, ho = upstream.shape
    side = 2 * params.radius + 1
    off_r = win_r - params.stride_y * np.arange(vo)[:, None] + params.radius
    off_c = win_c - params.stride_x * np.arange(ho)[None, :] + params.radius
    d_at_win = params.d[:, off_r, off_c]  # [N, vo, ho]
    dc = -(d_at_win * upstream[None]).sum(axis=(1, 2))
    if params.basis_frozen:
        return dm, dc, None
    acc = np.zeros(side * side)
    np.add.at(acc, (off_r * side + off_c).ravel(), upstream.ravel())
    dd = -params.c[:, None, None] * acc.reshape(1, side, side)
    return dm, dc, dd


def defpool_channels_forward(maps, coeff, basis, radius, stride_y, stride_x):
    """Pool a [C, V, H] stack channel by channel.

    ``coeff`` is [P, N] and ``basis`` [P, N, 2R+1, 2R+1] with P either C
    (independent deformation parameters per channel) or 1 (shared).
    """
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    n_ch = maps.shape[0]
    # tensordot, not einsum: must sum in the same order as
    # DefPoolParams.penalty() so the two paths agree bitwise.
    penalties = np.stack([np.tensordot(coeff[p], basis[p], axes=(0, 0))
                          for p in range(coeff.shape[0])])
    outs, win_rs, win_cs = [], [], []
    for ch in range(n_ch):
        pen = penalties[0] if penalties.shape[0] == 1 else penalties[ch]
        o, wr, wc = kernels.defpool_forward(
            np.ascontiguousarray(maps[ch]),
            np.ascontiguousarray(pen),
            radius,
            stride_y,
            stride_x,
        )
        outs.append(np.asarray(o))
        win_rs.append(np.asarray(wr))
        win_cs.append(np.asarray(wc))
    cache = (np.stack(win_rs), np.stack(win_cs), maps.shape)
    return np.stack(outs), cache


def defpool_channels_backward(upstream, cache, coeff, basis, radius, stride_y, stride_x):
    """Channel-stacked gradients (dmaps, dcoeff, dbasis) matching the
    shapes of the forward inputs; shared parameters accumulate over
    channels."""
    win_r, win_c, (n_ch, v, h) = cache
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    vo, ho = upstream.shape[1], upstream.shape[2]
    side = 2 * radius + 1
    off_r = win_r - stride_y * np.arange(vo)[None, :, None] + radius
    off_c = win_c - stride_x * np.arange(ho)[None, None, :] + radius
    dmaps = np.empty((n_ch, v, h))
    dcoeff = np.zeros_like(coeff)
    dbasis = np.zeros_like(basis)
    shared = coeff.shape[0] == 1
    for ch in range(n_ch):
        p = 0 if shared else ch
        dmaps[ch] = np.asarray(
            kernels.defpool_backward(win_r[ch], win_c[ch], upstream[ch], v, h)
        )
        d_at_win = basis[p][:, off_r[ch], off_c[ch]]  # [N, vo, ho]
        dcoeff[p] += -(d_at_win * upstream[ch][None]).sum(axis=(1, 2))
        acc = np.zeros(side * side)
        np.add.at(acc, (off_r[ch] * side + off_c[ch]).ravel(), upstream[ch].ravel())
        dbasis[p] += -coeff[p][:, None, None] * acc.reshape(1, side, side)
    return dmaps, dcoeff, dbasis


@dataclass
class DpmParams:
    """Quadratic single-part deformation score parameters.

    Anchor (anchor_i, anchor_j), quadratic coefficients quad_i/quad_j (>= 0), linear
    coefficients lin_i/lin_j, and the derived constant (not learned)
    ``lin_i^2/(4*quad_i) + lin_j^2/(4*quad_j)``.
    """

    anchor_i: int
    anchor_j: int
    quad_i: float
    quad_j: float
    lin_i: float = 0.0
    lin_j: float = 0.0
    constant: float = field(init=False)

    def __post_init__(self):
        if self.quad_i < 0 or self.quad_j < 0:
            raise ValueError("quadratic coefficients must be non-negative")
        self.constant = _square_completion_constant(
            self.quad_i, self.lin_i
        ) + _square_completion_constant(self.quad_j, self.lin_j)


def _square_completion_constant(quad, lin):
    if quad > 0:
        return lin * lin / (4.0 * quad)
    if lin != 0.0:
        # The completed-square form divides by quad; leave the constant at 0
        # here and let the oracle reject the configuration.
        return 0.0
    return 0.0


def dpm_score_oracle(m, q):
    """Brute-force part score: max over ALL cells of the penalized map.

    Evaluates m[i, j] - quad_i*(i - a_i + lin_i/(2*quad_i))^2
                      - quad_j*(j - a_j + lin_j/(2*quad_j))^2
    at every cell and returns the max.  Exhaustive by design — this is the
    oracle the pooling layer is checked against.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("map must be non-empty")
    for quad, lin, axis in ((q.quad_i, q.lin_i, "i"), (q.quad_j, q.lin_j, "j")):
        if quad == 0 and lin != 0.0:
            raise ValueError(
                f"axis {axis}: zero quadratic with nonzero linear coefficient "
                "has no completed-square form"
            )
    v, h = m.shape
    i = np.arange(v, dtype=np.float64)[:, None]
    j = np.arange(h, dtype=np.float64)[None, :]
    cost = np.zeros_like(m)
    if q.quad_i > 0:
        cost = cost + q.quad_i * (i - q.anchor_i + q.lin_i / (2.0 * q.quad_i)) ** 2
    if q.quad_j > 0:
        cost = cost + q.quad_j * (j - q.anchor_j + q.lin_j / (2.0 * q.quad_j)) ** 2
    return float((m - cost).max())


def dpm_to_defpool(q, v, h):
    """Express a quadratic part score as a single-block deformation pool.

    Returns ``(params, constant)``: strides (v, h) give one output block
    centered at (0, 0), the radius covers every cell of a [v, h] map, the
    four basis maps are (i-a_i)^2, (j-a_j)^2, (i-a_i), (j-a_j) with
    coefficients (quad_i, quad_j, lin_i, lin_j), and ``constant`` is the
    completed-square remainder to subtract from the pooled output:

        defpool(m, params) - constant == dpm_score_oracle(m, q)
    """
    radius = max(v - 1, h - 1, 1)
    side = 2 * radius + 1
    i = np.arange(-radius, radius + 1, dtype=np.float64)[:, None]
    j = np.arange(-radius, radius + 1, dtype=np.float64)[None, :]
    zeros = np.zeros((side, side))
    d = np.stack(
        [
            np.broadcast_to((i - q.anchor_i) ** 2, (side, side)),
            np.broadcast_to((j - q.anchor_j) ** 2, (side, side)),
            np.broadcast_to(i - q.anchor_i + zeros, (side, side)),
            np.broadcast_to(j - q.anchor_j + zeros, (side, side)),
        ]
    )
    params = DefPoolParams(
        radius=radius,
        stride_y=v,
        stride_x=h,
        c=np.array([q.quad_i, q.quad_j, q.lin_i, q.lin_j]),
        d=np.ascontiguousarray(d),
        basis_frozen=True,
    )
    return params, q.constant
