"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Setting ``STENSEMBLE_PURE_PYTHON=1`` forces the
fallback.
"""

import os
from types import ModuleType

from . import _pykernels

_FORCE_PY = os.environ.get("STENSEMBLE_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("pure-python backend forced")
    from . import _ckernels
except ImportError:
    _ckernels = None

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _active is _ckernels else "python"


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def get_backend(name=None) -> ModuleType:
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _active
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global _active, BACKEND
    prev = BACKEND
    _active = get_backend(name)
    BACKEND = name
    return prev


def jacobi_eigh(a, tol=1e-15, max_sweeps=100):
    return _active.jacobi_eigh(a, tol, max_sweeps)


def linkage_cut(dist, k, ward):
    return _active.linkage_cut(dist, k, int(ward))


def gat_forward(L, R, a, indptr, indices, slope):
    return _active.gat_forward(L, R, a, indptr, indices, slope)


def gat_backward(L, R, a, indptr, indices, slope, alpha, G):
    return _active.gat_backward(L, R, a, indptr, indices, slope, alpha, G)


def lstm_forward(XW, U):
    return _active.lstm_forward(XW, U)


def lstm_backward(U, H, C, A, dH):
    return _active.lstm_backward(U, H, C, A, dH)
