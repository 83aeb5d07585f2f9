"""Kernel selection: compiled Cython when importable, pure Python otherwise.

``POLARSFP_BACKEND=python`` forces the fallback.
"""
import os

from . import _kernel_py

try:
    from . import _kernel_cy
except ImportError:  # extension not built
    _kernel_cy = None

_KERNELS = {"python": _kernel_py}
if _kernel_cy is not None:
    _KERNELS["cython"] = _kernel_cy


def _default():
    forced = os.environ.get("POLARSFP_BACKEND", "").strip().lower()
    if forced:
        if forced not in _KERNELS:
            raise ImportError(f"POLARSFP_BACKEND={forced!r} is not available; have {sorted(_KERNELS)}")
        return forced
    return "cython" if "cython" in _KERNELS else "python"


BACKEND = _default()


def available():
    return sorted(_KERNELS)


def get_kernel(name=None):
    return _KERNELS[name or BACKEND]
