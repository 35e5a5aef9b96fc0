"""Select the kernel implementation at import time.

The compiled extension is used when it imports; ``NSGP_BACKEND=python``
forces the numpy fallback.
"""
import os

from . import _kernels_py

_requested = os.environ.get("NSGP_BACKEND", "auto").lower()

kernels = _kernels_py
name = "python"
if _requested != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _requested == "compiled":
            raise
    else:
        kernels = _compiled
        name = "compiled"


def use(backend):
    """Switch backend at runtime ('compiled' or 'python'); returns the previous name."""
    global kernels, name
    prev = name
    if backend == "python":
        kernels, name = _kernels_py, "python"
    elif backend == "compiled":
        from . import _kernels as _compiled

        kernels, name = _compiled, "compiled"
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return prev


def available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return ["python"]
    return ["compiled", "python"]
