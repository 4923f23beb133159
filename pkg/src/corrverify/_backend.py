"""Kernel backend selection.

The compiled Cython core is used when it has been built; otherwise the numpy
fallback is used. Set ``CORRVERIFY_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

NAME = "python"
kernels = _kernels_py

if os.environ.get("CORRVERIFY_BACKEND", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        kernels = _compiled
        NAME = "compiled"


def available():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return ["compiled"] + names


def get(name):
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
