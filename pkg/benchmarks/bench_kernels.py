#!/usr/bin/env python3
"""Time the compiled kernels against the NumPy reference.

Runs each hot kernel on network-realistic shapes, checks both
implementations agree, and prints a table of per-call times with the
speedup.  A full forward/backward of the default model closes the table.

    python3 benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from defnet import kernels
from defnet.kernels import available_impls, get_impl


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def agree(a, b):
    if isinstance(a, (tuple, list)):
        return len(a) == len(b) and all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-12, atol=1e-12)


def bench_cases(rng):
    """(name, args_builder, call) per kernel on model-sized inputs."""
    x = rng.standard_normal((16, 24, 24))
    w = rng.standard_normal((24, 16, 3, 3))
    b = rng.standard_normal(24)
    dy_conv = rng.standard_normal((24, 24, 24))
    pooled_in = rng.standard_normal((24, 24, 24))
    dy_pool = rng.standard_normal((24, 12, 12))
    m = rng.standard_normal((12, 12))
    penalty = np.abs(rng.standard_normal((3, 3)))
    dy_def = rng.standard_normal((6, 6))

    cases = [
        ("conv2d_forward", lambda impl: impl.conv2d_forward(x, w, b, 1, 1)),
        ("conv2d_backward", lambda impl: impl.conv2d_backward(x, w, 1, 1, dy_conv)),
        ("maxpool_forward", lambda impl: impl.maxpool_forward(pooled_in, 2, 2, 2, 2)),
        ("defpool_forward", lambda impl: impl.defpool_forward(m, penalty, 1, 2, 2)),
    ]
    arg, _shape = kernels.maxpool_forward(pooled_in, 2, 2, 2, 2)[1], None
    cases.append(("maxpool_backward",
                  lambda impl: impl.maxpool_backward(arg, dy_pool, 24, 24)))
    _out, win_r, win_c = kernels.defpool_forward(m, penalty, 1, 2, 2)
    cases.append(("defpool_backward",
                  lambda impl: impl.defpool_backward(win_r, win_c, dy_def, 12, 12)))
    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    impls = available_impls()
    print("available implementations:", ", ".join(impls))
    print("selected at import:", kernels.IMPLEMENTATION)
    if "fast" not in impls:
        print("compiled extension not built; nothing to compare")
        return

    ref, fast = get_impl("ref"), get_impl("fast")
    rng = np.random.default_rng(0)
    print()
    print("%-18s %12s %12s %9s" % ("kernel", "ref", "fast", "speedup"))
    for name, call in bench_cases(rng):
        if not agree(call(ref), call(fast)):
            raise SystemExit(f"{name}: implementations disagree")
        t_ref = timeit(lambda: call(ref), args.repeats)
        t_fast = timeit(lambda: call(fast), args.repeats)
        print("%-18s %10.3f ms %10.3f ms %8.1fx"
              % (name, 1e3 * t_ref, 1e3 * t_fast, t_ref / t_fast))

    from defnet.network import NetworkConfig, build_network
    from defnet.layers import LossKind, loss_forward_backward

    net = build_network(NetworkConfig(), 0)
    image = rng.uniform(0.0, 1.0, NetworkConfig().input_shape)

    def full_pass():
        scores, cache = net.forward(image)
        _, ds = loss_forward_backward(scores, 1, LossKind.hinge())
        net.backward(cache, ds)

    names = ["conv2d_forward", "conv2d_backward", "maxpool_forward",
             "maxpool_backward", "defpool_forward", "defpool_backward"]
    print()
    for impl_name, impl in (("ref", ref), ("fast", fast)):
        for n in names:
            setattr(kernels, n, getattr(impl, n))
        t = timeit(full_pass, max(3, args.repeats // 5))
        print("full forward+backward (%s kernels): %.2f ms"
              % (impl_name, 1e3 * t))
    for n in names:
        setattr(kernels, n, getattr(kernels._impl, n))


if __name__ == "__main__":
    main()
