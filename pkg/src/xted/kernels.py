"""Kernel dispatch: compiled extension if importable, numpy fallback otherwise.

Set ``XTED_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("XTED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm_forward(x, eps=1e-5):
    """Row-normalize over the last axis. Returns (xhat, rstd) with xhat shaped like x."""
    xhat, rstd = _impl.layer_norm_forward(_rows(x), eps)
    return xhat.reshape(x.shape), rstd


def layer_norm_backward(gout, xhat, rstd):
    return _impl.layer_norm_backward(_rows(gout), _rows(xhat), rstd).reshape(gout.shape)


def softmax_forward(s):
    return _impl.softmax_forward(_rows(s)).reshape(s.shape)


def softmax_backward(gout, p):
    return _impl.softmax_backward(_rows(gout), _rows(p)).reshape(p.shape)


def gelu_forward(x):
    out, sig = _impl.gelu_forward(np.ascontiguousarray(x).ravel())
    return out.reshape(x.shape), sig.reshape(x.shape)


def gelu_backward(gout, x, sig):
    flat = _impl.gelu_backward(
        np.ascontiguousarray(gout).ravel(), np.ascontiguousarray(x).ravel(), sig.ravel()
    )
    return flat.reshape(x.shape)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place update of flat contiguous float64 arrays ``p``, ``m``, ``v``."""
    _impl.adam_update(p, np.ascontiguousarray(g).ravel(), m, v, lr, beta1, beta2, eps, step)
