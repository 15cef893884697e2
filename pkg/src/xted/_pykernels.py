"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or disabled with
``XTED_PURE_PYTHON=1``. Every function here has a twin with the same
signature in ``_ckernels.pyx``.
"""

import numpy as np

GELU_K = 1.702


def layer_norm_forward(x, eps):
    """Normalize rows of a 2-D array. Returns (out, xhat, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat, rstd[:, 0]


def layer_norm_backward(gout, xhat, rstd):
    d = xhat.shape[1]
    g_mean = gout.mean(axis=1, keepdims=True)
    gx_mean = (gout * xhat).mean(axis=1, keepdims=True)
    return (gout - g_mean - xhat * gx_mean) * rstd[:, None]


def softmax_forward(s):
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(gout, p):
    dot = (gout * p).sum(axis=1, keepdims=True)
    return p * (gout - dot)


def gelu_forward(x):
    sig = 1.0 / (1.0 + np.exp(-GELU_K * x))
    return x * sig, sig


def gelu_backward(gout, x, sig):
    return gout * (sig + GELU_K * x * sig * (1.0 - sig))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update on flat float64 arrays; ``step`` is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
