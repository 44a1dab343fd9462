"""Backend selection for the GRU recurrence.

The compiled extension is used when it was built and
``DECONFOUND_PURE_PYTHON`` is unset; otherwise the numpy implementation.
"""

import os

from . import _gru_py

try:
    from . import _gru_ext

    HAVE_COMPILED = True
except ImportError:  # extension not built
    _gru_ext = None
    HAVE_COMPILED = False

if HAVE_COMPILED and not os.environ.get("DECONFOUND_PURE_PYTHON"):
    BACKEND, _impl = "compiled", _gru_ext
else:
    BACKEND, _impl = "python", _gru_py


def use_backend(name):
    """Switch backend at runtime (``"python"`` or ``"compiled"``)."""
    global _impl, BACKEND
    if name == "python":
        _impl = _gru_py
    elif name == "compiled":
        if not HAVE_COMPILED:
            raise ImportError("compiled GRU kernels are not built")
        _impl = _gru_ext
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def gru_forward(xw, U, h0, mask):
    return _impl.gru_forward(xw, U, h0, mask)


def gru_backward(dhs, U, h0, mask, hs, cache):
    return _impl.gru_backward(dhs, U, h0, mask, hs, cache)


def sigmoid(x):
    return _gru_py.sigmoid(x)
