"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``ESCAPEMETA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def get_kernels(name=None):
    """Return the kernel module ``"compiled"``, ``"python"`` or the default."""
    if name is None:
        name = BACKEND
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


if _compiled is not None and not os.environ.get("ESCAPEMETA_PURE_PYTHON"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

kernels = get_kernels()
HAVE_COMPILED = _compiled is not None
