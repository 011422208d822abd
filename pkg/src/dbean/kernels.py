"""Backend selection for the recurrence scans.

The compiled extension is used when it imports; set ``DBEAN_PURE_PYTHON=1`` to
force the numpy fallback.
"""

import os

import numpy as np

from . import _scan_py

if os.environ.get("DBEAN_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _scan as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _scan_py


def available_backends():
    return ["cython", "numpy"] if _compiled is not None else ["numpy"]


def _module(backend):
    if backend is None:
        return _impl
    if backend == "numpy":
        return _scan_py
    if backend == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"backend {backend!r} not available; have {available_backends()}")


def scan_forward(pre, w_h, backend=None):
    """Run ``H[t] = tanh(pre[t] + H[t-1] @ w_h.T)`` over time-major ``pre``."""
    pre = np.ascontiguousarray(pre)
    w_h = np.ascontiguousarray(w_h, dtype=pre.dtype)
    out = np.empty_like(pre)
    _module(backend).scan_forward(pre, w_h, out)
    return out


def scan_backward(states, grad_states, w_h, backend=None):
    """Gradient w.r.t. the pre-activations of :func:`scan_forward`."""
    states = np.ascontiguousarray(states)
    grad_states = np.ascontiguousarray(grad_states, dtype=states.dtype)
    w_h = np.ascontiguousarray(w_h, dtype=states.dtype)
    grad_pre = np.empty_like(states)
    carry = np.empty(states.shape[1:], dtype=states.dtype)
    _module(backend).scan_backward(states, grad_states, w_h, grad_pre, carry)
    return grad_pre
