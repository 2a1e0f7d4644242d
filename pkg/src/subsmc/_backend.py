"""Select the compiled kernel backend, falling back to numpy.

Set ``SUBSMC_BACKEND=python`` to force the numpy implementation (used by the
benchmark and by tests that compare the two).
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("SUBSMC_BACKEND", "").lower() not in ("python", "numpy", "py"):
    try:
        from . import _core as kernels  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        kernels = _pykernels
        BACKEND = "python"


def get_kernels(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), default active."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
