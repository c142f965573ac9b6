import numpy as np
import pytest

from defnet.gradcheck import (
    compare_gradients,
    finite_diff_gradient,
    run_suite,
    suite_cases,
    tie_free,
)


def test_finite_diff_on_quadratic():
    # d/dx sum(x^2) = 2x, exact for central differences on a quadratic
    # up to rounding.
    x = np.array([1.0, -2.0, 0.5])
    g = finite_diff_gradient(lambda v: float((v ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-9)


def test_finite_diff_keeps_input_unchanged():
    x = np.array([1.0, 2.0])
    before = x.copy()
    finite_diff_gradient(lambda v: float(v.sum()), x)
    np.testing.assert_array_equal(x, before)


def test_compare_gradients_pass_and_fail():
    a = np.array([1.0, 2.0])
    assert compare_gradients(a, a).passed
    r = compare_gradients(a, a + 1e-2)
    assert not r.passed
    assert r.max_abs_err == pytest.approx(1e-2, rel=1e-6)


def test_compare_gradients_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        compare_gradients(np.zeros(2), np.zeros(3))


def test_tie_free_separation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = tie_free(rng, (5, 5)).reshape(-1)
        gaps = np.diff(np.sort(x))
        # Separation must comfortably exceed the finite-difference step.
        assert gaps.min() > 2e-5


def test_suite_covers_every_operator():
    names = {name for name, _ in suite_cases(seed=0)}
    for expected in ("conv.input", "conv.weights", "conv.bias", "fc.input",
                     "fc.weights", "relu.input", "maxpool.input",
                     "defpool.input", "defpool.coeff", "defpool.basis",
                     "loss.softmax", "loss.hinge"):
        assert expected in names, expected


def test_suite_two_seeds_clean():
    failures = [(s, n) for s, n, rep in run_suite(seeds=range(2))
                if not rep.passed]
    assert failures == []
