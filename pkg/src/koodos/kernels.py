"""Kernel backend selection.

The compiled extension is used when it was built and ``KOODOS_PURE_PYTHON`` is
unset; otherwise the numpy fallback is loaded.  ``BACKEND`` names the choice.
"""
import os

from koodos import _kernels_py

BACKEND = "python"
adam_update = _kernels_py.adam_update

if not os.environ.get("KOODOS_PURE_PYTHON"):
    try:
        from koodos import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        adam_update = _compiled.adam_update
        BACKEND = "cython"


def backends():
    """Available implementations by name, for tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from koodos import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
