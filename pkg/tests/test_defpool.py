"""Deformation pooling: geometry, the maxpool degeneracy, and the
single-part quadratic equivalence that anchors the whole construction.
"""

import numpy as np
import pytest

from defnet.defpool import (
    DefPoolParams,
    DpmParams,
    defpool_backward,
    defpool_channels_backward,
    defpool_channels_forward,
    defpool_forward,
    dpm_score_oracle,
    dpm_to_defpool,
)
from defnet.gradcheck import check_gradients, tie_free
from defnet.layers import MaxPoolLayer


def _params(rng, radius=1, sy=2, sx=2, n=2):
    side = 2 * radius + 1
    return DefPoolParams(
        radius=radius, stride_y=sy, stride_x=sx,
        c=rng.uniform(0.0, 1.0, n),
        d=rng.uniform(0.0, 1.0, (n, side, side)),
    )


def test_output_shape_is_stride_grid():
    rng = np.random.default_rng(0)
    for v, h, sy, sx in ((8, 8, 2, 2), (9, 7, 3, 2), (5, 5, 5, 5), (4, 6, 1, 1)):
        out, _ = defpool_forward(rng.standard_normal((v, h)), _params(rng, sy=sy, sx=sx))
        assert out.shape == (v // sy, h // sx)


def test_single_cell_map():
    rng = np.random.default_rng(1)
    p = _params(rng, radius=1, sy=1, sx=1)
    out, _ = defpool_forward(np.array([[3.5]]), p)
    # Only the center displacement is in bounds; its penalty applies.
    assert out[0, 0] == pytest.approx(3.5 - p.penalty()[1, 1], abs=1e-15)


def test_zero_coefficients_reduce_to_maxpool_bitwise():
    rng = np.random.default_rng(2)
    for _ in range(60):
        v = int(rng.integers(5, 14))
        h = int(rng.integers(5, 14))
        radius = int(rng.integers(1, (min(v, h) - 1) // 2 + 1))
        sy = int(rng.integers(1, 4))
        sx = int(rng.integers(1, 4))
        m = rng.standard_normal((v, h))
        side = 2 * radius + 1
        p = DefPoolParams(radius=radius, stride_y=sy, stride_x=sx,
                          c=np.zeros(3), d=rng.uniform(0, 1, (3, side, side)))
        got, _ = defpool_forward(m, p)
        want, _ = MaxPoolLayer((side, side), (sy, sx)).forward(m[None])
        assert np.array_equal(got, want[0])  # exact, not approx


def test_penalty_shifts_winner():
    # A heavy penalty on the off-center cells forces the centered pick
    # even when a neighbor is larger.
    m = np.array([[0.0, 10.0], [0.0, 0.0]])
    p = DefPoolParams(radius=1, stride_y=2, stride_x=2,
                      c=np.array([100.0]),
                      d=np.array([[[1.0, 1, 1], [1, 0, 1], [1, 1, 1]]]))
    out, (win_r, win_c, _) = defpool_forward(m, p)
    assert out.shape == (1, 1)
    assert (win_r[0, 0], win_c[0, 0]) == (0, 0)
    assert out[0, 0] == 0.0


def test_ties_go_to_first_in_row_major_order():
    # All-zero map, zero penalty: every in-bounds displacement ties.
    # The corner block's window hangs off the top-left edge, so the
    # first in-bounds cell in row-major scan order is (0, 0).
    m = np.zeros((3, 3))
    p = DefPoolParams(radius=1, stride_y=3, stride_x=3,
                      c=np.zeros(1), d=np.zeros((1, 3, 3)))
    _, (win_r, win_c, _) = defpool_forward(m, p)
    assert (win_r[0, 0], win_c[0, 0]) == (0, 0)


def test_ties_interior_block():
    # An interior block's window is fully in bounds; the tie goes to its
    # top-left cell.
    m = np.zeros((5, 5))
    p = DefPoolParams(radius=1, stride_y=2, stride_x=2,
                      c=np.zeros(1), d=np.zeros((1, 3, 3)))
    _, (win_r, win_c, _) = defpool_forward(m, p)
    assert (win_r[1, 1], win_c[1, 1]) == (1, 1)


def test_oob_displacements_never_win():
    rng = np.random.default_rng(3)
    for _ in range(30):
        v, h = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        m = rng.standard_normal((v, h))
        p = _params(rng, radius=2, sy=1, sx=1)
        _, (win_r, win_c, _) = defpool_forward(m, p)
        assert win_r.min() >= 0 and win_r.max() < v
        assert win_c.min() >= 0 and win_c.max() < h


def test_backward_routes_map_gradient_to_winner():
    rng = np.random.default_rng(4)
    m = tie_free(rng, (6, 6))
    p = _params(rng)
    out, cache = defpool_forward(m, p)
    dy = np.ones_like(out)
    dm, dc, dd = defpool_backward(dy, cache, p)
    assert dm.sum() == out.size
    win_r, win_c, _ = cache
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            assert dm[win_r[i, j], win_c[i, j]] >= 1.0


def test_gradients_map_coeff_basis():
    rng = np.random.default_rng(5)
    for trial in range(5):
        m = tie_free(rng, (7, 7))
        p = _params(rng, radius=1, sy=2, sx=2, n=3)
        out0, cache = defpool_forward(m, p)
        proj = rng.standard_normal(out0.shape)
        dm, dc, dd = defpool_backward(proj, cache, p)

        def fm(mv):
            return float((defpool_forward(mv, p)[0] * proj).sum())

        assert check_gradients(fm, m, dm).passed

        c0 = p.c.copy()

        def fc(cv):
            q = DefPoolParams(radius=p.radius, stride_y=p.stride_y,
                              stride_x=p.stride_x, c=cv, d=p.d)
            return float((defpool_forward(m, q)[0] * proj).sum())

        assert check_gradients(fc, c0, dc).passed

        d0 = p.d.copy()

        def fd(dv):
            q = DefPoolParams(radius=p.radius, stride_y=p.stride_y,
                              stride_x=p.stride_x, c=p.c, d=dv)
            return float((defpool_forward(m, q)[0] * proj).sum())

        assert check_gradients(fd, d0, dd).passed


def test_frozen_basis_returns_none():
    rng = np.random.default_rng(6)
    p = _params(rng)
    p.basis_frozen = True
    out, cache = defpool_forward(tie_free(rng, (6, 6)), p)
    _, _, dd = defpool_backward(np.ones_like(out), cache, p)
    assert dd is None


def test_channels_wrapper_matches_per_channel_calls():
    rng = np.random.default_rng(7)
    maps = rng.standard_normal((3, 8, 8))
    coeff = rng.uniform(0, 1, (3, 2))
    basis = rng.uniform(0, 1, (3, 2, 3, 3))
    out, cache = defpool_channels_forward(maps, coeff, basis, 1, 2, 2)
    for ch in range(3):
        p = DefPoolParams(radius=1, stride_y=2, stride_x=2,
                          c=coeff[ch], d=basis[ch])
        want, _ = defpool_forward(maps[ch], p)
        np.testing.assert_array_equal(out[ch], want)


def test_channels_shared_parameters_accumulate():
    # P == 1 shares one deformation parameter set across channels; its
    # gradient is the sum of the per-channel gradients.
    rng = np.random.default_rng(8)
    maps = tie_free(rng, (2, 6, 6))
    coeff = rng.uniform(0, 1, (1, 2))
    basis = rng.uniform(0, 1, (1, 2, 3, 3))
    out, cache = defpool_channels_forward(maps, coeff, basis, 1, 2, 2)
    up = rng.standard_normal(out.shape)
    dmaps, dcoeff, dbasis = defpool_channels_backward(
        up, cache, coeff, basis, 1, 2, 2)
    assert dmaps.shape == maps.shape
    assert dcoeff.shape == coeff.shape
    assert dbasis.shape == basis.shape
    total = np.zeros(2)
    for ch in range(2):
        p = DefPoolParams(radius=1, stride_y=2, stride_x=2,
                          c=coeff[0], d=basis[0])
        _, cc = defpool_forward(maps[ch], p)
        _, dc, _ = defpool_backward(up[ch], cc, p)
        total += dc
    np.testing.assert_allclose(dcoeff[0], total, rtol=1e-12)


# ----- quadratic part-score equivalence


def test_dpm_constant_completes_the_square():
    q = DpmParams(anchor_i=2, anchor_j=1, quad_i=0.5, quad_j=0.25,
                  lin_i=0.3, lin_j=-0.2)
    want = 0.3 ** 2 / (4 * 0.5) + 0.2 ** 2 / (4 * 0.25)
    assert q.constant == pytest.approx(want, rel=1e-15)


def test_dpm_oracle_pure_quadratic_center_peak():
    # With the map maximal exactly at the anchor and no linear term the
    # oracle returns the peak untouched.
    m = np.zeros((5, 5))
    m[2, 3] = 1.0
    q = DpmParams(anchor_i=2, anchor_j=3, quad_i=1.0, quad_j=1.0)
    assert dpm_score_oracle(m, q) == pytest.approx(1.0, abs=1e-15)


def test_dpm_oracle_rejects_linear_without_quadratic():
    q = DpmParams(anchor_i=0, anchor_j=0, quad_i=0.0, quad_j=1.0, lin_i=0.5)
    with pytest.raises(ValueError):
        dpm_score_oracle(np.zeros((3, 3)), q)


def test_dpm_equivalence_random_maps():
    rng = np.random.default_rng(9)
    for _ in range(50):
        v = int(rng.integers(5, 10))
        h = int(rng.integers(5, 10))
        m = rng.standard_normal((v, h))
        q = DpmParams(
            anchor_i=int(rng.integers(0, v)),
            anchor_j=int(rng.integers(0, h)),
            quad_i=float(np.abs(rng.standard_normal())) + 0.2,
            quad_j=float(np.abs(rng.standard_normal())) + 0.2,
            lin_i=float(rng.standard_normal()),
            lin_j=float(rng.standard_normal()),
        )
        params, constant = dpm_to_defpool(q, v, h)
        out, _ = defpool_forward(m, params)
        assert out.shape == (1, 1)
        got = float(out[0, 0]) - constant
        assert got == pytest.approx(dpm_score_oracle(m, q), abs=1e-9)


def test_dpm_equivalence_corner_anchors():
    rng = np.random.default_rng(10)
    for ai, aj in ((0, 0), (0, 6), (6, 0), (6, 6)):
        m = rng.standard_normal((7, 7))
        q = DpmParams(anchor_i=ai, anchor_j=aj, quad_i=0.4, quad_j=0.7,
                      lin_i=0.1, lin_j=-0.3)
        params, constant = dpm_to_defpool(q, 7, 7)
        out, _ = defpool_forward(m, params)
        got = float(out[0, 0]) - constant
        assert got == pytest.approx(dpm_score_oracle(m, q), abs=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        DefPoolParams(radius=0, stride_y=1, stride_x=1,
                      c=np.zeros(1), d=np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        DefPoolParams(radius=1, stride_y=1, stride_x=1,
                      c=np.zeros(2), d=np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        DefPoolParams(radius=1, stride_y=1, stride_x=1,
                      c=np.array([np.nan]), d=np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        DpmParams(anchor_i=0, anchor_j=0, quad_i=-1.0, quad_j=1.0)


def test_forward_rejects_bad_map():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError):
        defpool_forward(np.zeros((2, 2, 2)), _params(rng))
