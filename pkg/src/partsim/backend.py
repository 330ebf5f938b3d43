"""Kernel backend selection.

The hot numeric kernels (convolution and pooling forward/backward) exist in
two API-identical implementations: numba-compiled loops and a pure-numpy
im2col path. The active one is chosen once, at first use:

* ``PARTSIM_BACKEND=numba`` forces numba (import error if unavailable),
* ``PARTSIM_BACKEND=numpy`` forces the numpy fallback,
* unset: numba if it imports, numpy otherwise.

``benchmarks/bench_kernels.py`` compares the two on training-shaped inputs.
"""

from __future__ import annotations

import os

ENV_VAR = "PARTSIM_BACKEND"
_CHOICES = ("numba", "numpy")

_impl = None
_name = None


def _load(name: str):
    if name == "numba":
        from . import _kernels_numba as impl
    else:
        from . import _kernels_numpy as impl
    return impl


def _resolve():
    global _impl, _name
    if _impl is not None:
        return _impl
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if choice and choice not in _CHOICES:
        raise ValueError(
            f"{ENV_VAR}={choice!r}: expected one of {', '.join(_CHOICES)}"
        )
    if choice:
        _impl, _name = _load(choice), choice
        return _impl
    try:
        _impl, _name = _load("numba"), "numba"
    except ImportError:
        _impl, _name = _load("numpy"), "numpy"
    return _impl


def backend_name() -> str:
    _resolve()
    return _name


def set_backend(name: str) -> None:
    """Force a backend (used by tests and the kernel benchmark)."""
    global _impl, _name
    if name not in _CHOICES:
        raise ValueError(f"unknown backend {name!r}")
    _impl, _name = _load(name), name


def conv2d_forward(x, w):
    return _resolve().conv2d_forward(x, w)


def conv2d_backward(x, w, dy):
    return _resolve().conv2d_backward(x, w, dy)


def maxpool2d_forward(x, size):
    return _resolve().maxpool2d_forward(x, size)


def maxpool2d_backward(dy, idx, h, w):
    return _resolve().maxpool2d_backward(dy, idx, h, w)
