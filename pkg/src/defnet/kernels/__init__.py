"""Hot numeric kernels with a compiled core and a NumPy fallback.

The compiled extension ``defnet.kernels._fast`` is built by setup.py when
Cython is available.  Import-time selection picks it when present; set
``DEFNET_KERNELS=ref`` or ``DEFNET_KERNELS=fast`` to force one side.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _ref


def get_impl(name):
    """Return the kernel module for ``name`` ("ref" or "fast")."""
    if name == "ref":
        return _ref
    if name == "fast":
        from . import _fast

        return _fast
    raise ValueError(f"unknown kernel implementation {name!r}")


def available_impls():
    names = ["ref"]
    try:
        get_impl("fast")
        names.append("fast")
    except ImportError:
        pass
    return names


def _select():
    choice = os.environ.get("DEFNET_KERNELS", "auto")
    if choice == "auto":
        try:
            return get_impl("fast"), "fast"
        except ImportError:
            return _ref, "ref"
    return get_impl(choice), choice


_impl, IMPLEMENTATION = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
defpool_forward = _impl.defpool_forward
defpool_backward = _impl.defpool_backward
