import os
import subprocess
import sys

import numpy as np
import pytest

from xted import _pykernels as py
from xted import kernels

ck = pytest.importorskip("xted._ckernels", reason="compiled extension not built")


@pytest.fixture
def x(rng):
    return rng.standard_normal((37, 13))


def test_layer_norm_parity(x, rng):
    a, ra = py.layer_norm_forward(x, 1e-5)
    b, rb = ck.layer_norm_forward(x, 1e-5)
    np.testing.assert_allclose(a, b, atol=1e-13)
    np.testing.assert_allclose(ra, rb, rtol=1e-13)
    g = rng.standard_normal(x.shape)
    np.testing.assert_allclose(py.layer_norm_backward(g, a, ra), ck.layer_norm_backward(g, a, ra), atol=1e-12)


def test_softmax_parity(x, rng):
    p1, p2 = py.softmax_forward(x), ck.softmax_forward(x)
    np.testing.assert_allclose(p1, p2, atol=1e-15)
    g = rng.standard_normal(x.shape)
    np.testing.assert_allclose(py.softmax_backward(g, p1), ck.softmax_backward(g, p1), atol=1e-14)


def test_gelu_parity(x, rng):
    f = x.ravel().copy()
    (o1, s1), (o2, s2) = py.gelu_forward(f), ck.gelu_forward(f)
    np.testing.assert_allclose(o1, o2, atol=1e-14)
    g = rng.standard_normal(f.shape)
    np.testing.assert_allclose(py.gelu_backward(g, f, s1), ck.gelu_backward(g, f, s1), atol=1e-14)


def test_adam_parity(rng):
    p0, g = rng.standard_normal(50), rng.standard_normal(50)
    states = []
    for mod in (py, ck):
        p, m, v = p0.copy(), np.zeros(50), np.zeros(50)
        for step in (1, 2, 3):
            mod.adam_update(p, g, m, v, 1e-2, 0.9, 0.999, 1e-8, step)
        states.append((p, m, v))
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, atol=1e-15)


def test_backend_selection():
    forced = os.environ.get("XTED_PURE_PYTHON", "") in ("1", "true", "yes")
    assert kernels.BACKEND == ("python" if forced else "cython")
    env = dict(os.environ, XTED_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from xted import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
