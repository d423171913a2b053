"""Kernel backend selection.

The compiled extension is used when importable; ``ADBENCH_PURE_PYTHON=1``
forces the numpy fallback. ``ADBENCH_STRICT=1`` pins BLAS to one thread so
matmul reductions happen in a fixed order.
"""
import os

from . import _npkernels

BACKEND = "numpy"
_impl = _npkernels

if os.environ.get("ADBENCH_PURE_PYTHON", "") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

STRICT = False


def enable_strict():
    """Pin BLAS/OpenMP pools to one thread for the rest of the process."""
    global STRICT
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    STRICT = True


if os.environ.get("ADBENCH_STRICT", "") == "1":
    enable_strict()


def get_backend(name):
    """Return a namespace of kernels for ``name`` in {"cython", "numpy"}."""
    if name == "numpy":
        return _npkernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
