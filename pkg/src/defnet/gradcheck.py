"""Finite-difference gradient checking for every backward pass in the repo.

All arrays are float64 and row-major; checks at eps=1e-5 are meaningless in
single precision.  Central differences give O(eps^2) truncation error.
"""

from dataclasses import dataclass

import numpy as np


def flatten_index(idx, shape):
    return int(np.ravel_multi_index(idx, shape))


def unflatten_index(flat, shape):
    return tuple(int(i) for i in np.unravel_index(flat, shape))


def finite_diff_gradient(f, x, epsilon=1e-5):
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    Perturbs one element at a time: grad_i = (f(x + eps*e_i) - f(x - eps*e_i))
    / (2*eps).  Raises if ``f`` returns a non-finite value, naming the
    perturbed index.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(f(x))
        flat[i] = orig - epsilon
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(
                f"non-finite function value while perturbing index "
                f"{unflatten_index(i, x.shape)}"
            )
        gflat[i] = (hi - lo) / (2.0 * epsilon)
    return grad


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    argmax_index: int
    epsilon: float
    passed: bool

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: max_abs={self.max_abs_err:.3e} "
            f"max_rel={self.max_rel_err:.3e} at flat index {self.argmax_index}"
        )


def compare_gradients(analytic, numeric, rel_tol=1e-4, abs_tol=1e-7, epsilon=0.0):
    """Element-wise comparison report between an analytic and a numeric gradient.

    Passes iff every element satisfies
    ``|a - n| <= abs_tol + rel_tol * max(|a|, |n|)``.
    ``argmax_index`` points at the element with the worst tolerance margin.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch: {analytic.shape} vs {numeric.shape}")
    diff = np.abs(analytic - numeric).reshape(-1)
    scale = np.maximum(np.abs(analytic), np.abs(numeric)).reshape(-1)
    with np.errstate(invalid="ignore"):
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    violation = diff - (abs_tol + rel_tol * scale)
    worst = int(np.argmax(violation)) if diff.size else 0
    return GradCheckReport(
        max_abs_err=float(diff.max(initial=0.0)),
        max_rel_err=float(rel.max(initial=0.0)),
        argmax_index=worst,
        epsilon=epsilon,
        passed=bool((violation <= 0).all()),
    )


def check_gradients(f, x, analytic, epsilon=1e-5, rel_tol=1e-4, abs_tol=1e-7):
    """Convenience wrapper: finite differences on ``f`` at ``x`` vs ``analytic``."""
    numeric = finite_diff_gradient(f, x, epsilon)
    return compare_gradients(analytic, numeric, rel_tol, abs_tol, epsilon)


def tie_free(rng, shape, scale=1.0):
    """Random tensor with all pairwise-distinct entries.

    Adds a distinct deterministic offset per element so max-based operations
    are differentiable at the sample (no ties to break).
    """
    n = int(np.prod(shape))
    base = rng.standard_normal(n) * scale
    rank = np.argsort(np.argsort(base))
    offsets = np.linspace(0.0, 1e-3 * scale, n)
    return (base + offsets[rank]).reshape(shape)


def _project(out, rng):
    """A fixed random linear functional turning a tensor output into a scalar."""
    p = rng.standard_normal(np.asarray(out).shape)
    return p


def suite_cases(seed, rel_tol=1e-4, abs_tol=1e-7, epsilon=1e-5):
    """Run every backward pass against finite differences for one seed.

    Yields ``(name, GradCheckReport)`` pairs covering conv, fc, relu,
    maxpool, the deformation pooling (input, coefficients, basis) and both
    loss kinds.  Inputs are tie-free and kept away from kinks so central
    differences are valid.
    """
    from .layers import (ConvLayer, FcLayer, MaxPoolLayer, ReluLayer,
                         LossKind, loss_forward_backward)
    from .defpool import DefPoolParams, defpool_forward, defpool_backward

    rng = np.random.default_rng(seed)

    # conv: [2,6,6] -> 3 filters of 3x3
    x = tie_free(rng, (2, 6, 6))
    w = tie_free(rng, (3, 2, 3, 3), scale=0.5)
    b = rng.standard_normal(3)
    conv = ConvLayer(w, b, stride=1, padding=1)
    y, cache = conv.forward(x)
    p = _project(y, rng)
    dx, grads = conv.backward(cache, p)
    dw, db = grads["weights"], grads["bias"]

    def conv_in(v):
        return float((conv.forward(v)[0] * p).sum())

    def conv_w(v):
        return float((ConvLayer(v, b, 1, 1).forward(x)[0] * p).sum())

    def conv_b(v):
        return float((ConvLayer(w, v, 1, 1).forward(x)[0] * p).sum())

    yield "conv.input", check_gradients(conv_in, x, dx, epsilon, rel_tol, abs_tol)
    yield "conv.weights", check_gradients(conv_w, w, dw, epsilon, rel_tol, abs_tol)
    yield "conv.bias", check_gradients(conv_b, b, db, epsilon, rel_tol, abs_tol)

    # fc: 10 -> 4
    x = tie_free(rng, (10,))
    w = tie_free(rng, (4, 10), scale=0.5)
    b = rng.standard_normal(4)
    fc = FcLayer(w, b)
    y, cache = fc.forward(x)
    p = _project(y, rng)
    dx, grads = fc.backward(cache, p)
    dw, db = grads["weights"], grads["bias"]
    yield "fc.input", check_gradients(
        lambda v: float((FcLayer(w, b).forward(v)[0] * p).sum()), x, dx,
        epsilon, rel_tol, abs_tol)
    yield "fc.weights", check_gradients(
        lambda v: float((FcLayer(v, b).forward(x)[0] * p).sum()), w, dw,
        epsilon, rel_tol, abs_tol)
    yield "fc.bias", check_gradients(
        lambda v: float((FcLayer(w, v).forward(x)[0] * p).sum()), b, db,
        epsilon, rel_tol, abs_tol)

    # relu: keep inputs off the kink at zero
    x = tie_free(rng, (3, 5, 5))
    x = np.where(np.abs(x) < 1e-2, x + np.sign(x + 0.5) * 1e-2, x)
    relu = ReluLayer()
    y, cache = relu.forward(x)
    p = _project(y, rng)
    dx, _ = relu.backward(cache, p)
    yield "relu.input", check_gradients(
        lambda v: float((relu.forward(v)[0] * p).sum()), x, dx,
        epsilon, rel_tol, abs_tol)

    # maxpool 2x2/2 on tie-free input
    x = tie_free(rng, (2, 6, 6))
    pool = MaxPoolLayer((2, 2), (2, 2))
    y, cache = pool.forward(x)
    p = _project(y, rng)
    dx, _ = pool.backward(cache, p)
    yield "maxpool.input", check_gradients(
        lambda v: float((pool.forward(v)[0] * p).sum()), x, dx,
        epsilon, rel_tol, abs_tol)

    # deformation pooling on one map: input, coefficients, basis
    m = tie_free(rng, (7, 7), scale=2.0)
    c = np.abs(rng.standard_normal(2)) + 0.1
    d = tie_free(rng, (2, 3, 3), scale=0.3)
    params = DefPoolParams(radius=1, stride_y=2, stride_x=2, c=c, d=d)
    y, cache = defpool_forward(m, params)
    p = _project(y, rng)
    dm, dc, dd = defpool_backward(p, cache, params)

    def def_m(v):
        return float((defpool_forward(v, params)[0] * p).sum())

    def def_c(v):
        q = DefPoolParams(1, 2, 2, v, d)
        return float((defpool_forward(m, q)[0] * p).sum())

    def def_d(v):
        q = DefPoolParams(1, 2, 2, c, v)
        return float((defpool_forward(m, q)[0] * p).sum())

    yield "defpool.input", check_gradients(def_m, m, dm, epsilon, rel_tol, abs_tol)
    yield "defpool.coeff", check_gradients(def_c, c, dc, epsilon, rel_tol, abs_tol)
    yield "defpool.basis", check_gradients(def_d, d, dd, epsilon, rel_tol, abs_tol)

    # losses: scores away from hinge kinks
    scores = tie_free(rng, (4,))
    scores = np.where(np.abs(np.abs(scores) - 1.0) < 1e-2,
                      scores * 1.05 + 1e-2, scores)
    for kind_name, kind in (("softmax", LossKind.softmax()),
                            ("hinge", LossKind.hinge())):
        label = int(rng.integers(0, 4))
        _, dscores = loss_forward_backward(scores, label, kind)

        def loss_fn(v, _k=kind, _y=label):
            return float(loss_forward_backward(v, _y, _k)[0])

        yield f"loss.{kind_name}", check_gradients(
            loss_fn, scores, dscores, epsilon, rel_tol, abs_tol)


def run_suite(seeds=range(20), rel_tol=1e-4, abs_tol=1e-7, epsilon=1e-5):
    """All suite cases over many seeds; returns ``[(seed, name, report)]``."""
    results = []
    for seed in seeds:
        for name, report in suite_cases(seed, rel_tol, abs_tol, epsilon):
            results.append((seed, name, report))
    return results
