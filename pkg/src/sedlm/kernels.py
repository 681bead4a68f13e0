"""Backend selection for the recurrent hot loop.

The compiled extension is used when it imports; otherwise the numpy
implementation is. ``SEDLM_KERNELS=python`` forces the fallback.
"""
import os

from sedlm import _recurrence_py

try:
    if os.environ.get("SEDLM_KERNELS", "auto").lower() == "python":
        raise ImportError("compiled kernels disabled by SEDLM_KERNELS")
    from sedlm import _recurrence_ext
except ImportError:
    _recurrence_ext = None

BACKENDS = {"python": _recurrence_py}
if _recurrence_ext is not None:
    BACKENDS["cython"] = _recurrence_ext

BACKEND = "cython" if _recurrence_ext is not None else "python"
recurrence = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return recurrence
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
