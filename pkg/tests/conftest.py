import numpy as np
import pytest

from xted import numerics as nx


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grad(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each input array."""
    ts = [nx.Tensor(a, requires_grad=True) for a in arrays]
    with nx.Graph() as g:
        out = fn(*ts)
        g.backward(out)
    return [t.grad for t in ts]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> list of (label, ok, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(n, label, ok, detail=""):
    ACCEPTANCE.setdefault(n, []).append((label, bool(ok), detail))
    print(f"criterion {n} [{label}]: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{label}: {'ok' if ok else 'FAIL'} {d}".strip() for label, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  ({detail})")
