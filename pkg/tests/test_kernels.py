"""Compiled and reference kernels must be interchangeable.

Every test here runs the same call against both implementations when the
compiled extension is present, on randomized shapes including the awkward
ones (padding larger than kernel overhang, stride > 1, single-row inputs).
"""

import numpy as np
import pytest

from defnet.kernels import available_impls, get_impl

ref = get_impl("ref")
HAVE_FAST = "fast" in available_impls()
fast = get_impl("fast") if HAVE_FAST else None

needs_fast = pytest.mark.skipif(not HAVE_FAST, reason="compiled kernels not built")


def _conv_case(rng):
    cin = int(rng.integers(1, 5))
    cout = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5]))
    h = int(rng.integers(k, k + 9))
    w = int(rng.integers(k, k + 9))
    stride = int(rng.choice([1, 1, 1, 2]))
    pad = int(rng.integers(0, k // 2 + 2))
    x = rng.standard_normal((cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        return None
    dy = rng.standard_normal((cout, ho, wo))
    return x, wt, b, stride, pad, dy


@needs_fast
def test_conv_forward_matches_reference():
    rng = np.random.default_rng(11)
    tried = 0
    while tried < 40:
        case = _conv_case(rng)
        if case is None:
            continue
        x, w, b, stride, pad, _dy = case
        a = ref.conv2d_forward(x, w, b, stride, pad)
        f = fast.conv2d_forward(x, w, b, stride, pad)
        np.testing.assert_allclose(f, a, rtol=1e-12, atol=1e-12)
        tried += 1


@needs_fast
def test_conv_backward_matches_reference():
    rng = np.random.default_rng(12)
    tried = 0
    while tried < 40:
        case = _conv_case(rng)
        if case is None:
            continue
        x, w, b, stride, pad, dy = case
        for a, f in zip(ref.conv2d_backward(x, w, stride, pad, dy),
                        fast.conv2d_backward(x, w, stride, pad, dy)):
            np.testing.assert_allclose(f, a, rtol=1e-12, atol=1e-12)
        tried += 1


@needs_fast
def test_maxpool_matches_reference():
    rng = np.random.default_rng(13)
    for _ in range(40):
        c = int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        sy, sx = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(max(kh, sy), max(kh, sy) + 10))
        w = int(rng.integers(max(kw, sx), max(kw, sx) + 10))
        x = rng.standard_normal((c, h, w))
        ya, aa = ref.maxpool_forward(x, kh, kw, sy, sx)
        yf, af = fast.maxpool_forward(x, kh, kw, sy, sx)
        np.testing.assert_array_equal(yf, ya)
        np.testing.assert_array_equal(af, aa)
        dy = rng.standard_normal(np.shape(ya))
        np.testing.assert_array_equal(
            fast.maxpool_backward(af, dy, h, w), ref.maxpool_backward(aa, dy, h, w)
        )


@needs_fast
def test_defpool_matches_reference():
    rng = np.random.default_rng(14)
    for _ in range(60):
        v = int(rng.integers(2, 14))
        h = int(rng.integers(2, 14))
        radius = int(rng.integers(1, 4))
        sy = int(rng.integers(1, v + 1))
        sx = int(rng.integers(1, h + 1))
        m = rng.standard_normal((v, h))
        penalty = rng.standard_normal((2 * radius + 1, 2 * radius + 1))
        oa, ra, ca = ref.defpool_forward(m, penalty, radius, sy, sx)
        of, rf, cf = fast.defpool_forward(m, penalty, radius, sy, sx)
        np.testing.assert_array_equal(of, oa)
        np.testing.assert_array_equal(rf, ra)
        np.testing.assert_array_equal(cf, ca)
        dy = rng.standard_normal(np.shape(oa))
        np.testing.assert_array_equal(
            fast.defpool_backward(rf, cf, dy, v, h),
            ref.defpool_backward(ra, ca, dy, v, h),
        )


@needs_fast
def test_maxpool_ties_break_identically():
    # Constant inputs force every window into a tie; the winner index
    # must agree bit-for-bit or training would diverge between builds.
    x = np.zeros((2, 8, 8))
    ya, aa = ref.maxpool_forward(x, 3, 3, 2, 2)
    yf, af = fast.maxpool_forward(x, 3, 3, 2, 2)
    np.testing.assert_array_equal(af, aa)
    np.testing.assert_array_equal(yf, ya)


@needs_fast
def test_defpool_ties_break_identically():
    m = np.zeros((9, 9))
    penalty = np.zeros((3, 3))
    oa, ra, ca = ref.defpool_forward(m, penalty, 1, 2, 2)
    of, rf, cf = fast.defpool_forward(m, penalty, 1, 2, 2)
    np.testing.assert_array_equal(rf, ra)
    np.testing.assert_array_equal(cf, ca)


def test_conv_forward_against_naive_loop():
    # The reference itself is checked against a four-deep loop nobody
    # would optimize, on a couple of small fixed shapes.
    rng = np.random.default_rng(15)
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x = rng.standard_normal((2, 6, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ref.conv2d_forward(x, w, b, stride, pad)
        cout, ho, wo = got.shape
        want = np.zeros_like(got)
        for o in range(cout):
            for yo in range(ho):
                for xo in range(wo):
                    acc = b[o]
                    for c in range(2):
                        for u in range(3):
                            for v in range(3):
                                r = stride * yo + u - pad
                                s = stride * xo + v - pad
                                if 0 <= r < 6 and 0 <= s < 7:
                                    acc += x[c, r, s] * w[o, c, u, v]
                    want[o, yo, xo] = acc
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
