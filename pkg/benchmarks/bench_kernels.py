"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Also times one full denoiser training step under each backend, which shows
how much of the end-to-end cost the kernels actually account for (most of
it is matrix multiplication, which both backends hand to BLAS).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from xted import _pykernels

try:
    from xted import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((64 * 20, 64))
    s = rng.standard_normal((64 * 4 * 20, 20))
    p = rng.standard_normal(200_000)
    g = rng.standard_normal(200_000)

    def ln(mod):
        xhat, rstd = mod.layer_norm_forward(x, 1e-5)
        mod.layer_norm_backward(x, xhat, rstd)

    def sm(mod):
        y = mod.softmax_forward(s)
        mod.softmax_backward(s, y)

    def gl(mod):
        out, sig = mod.gelu_forward(x.ravel())
        mod.gelu_backward(x.ravel(), x.ravel(), sig)

    def adam(mod):
        mod.adam_update(p, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1)

    return {"layer_norm fwd+bwd": ln, "softmax fwd+bwd": sm, "gelu fwd+bwd": gl, "adam update": adam}


TRAIN_STEP = """
import time, numpy as np
from xted import kernels, model as M, training as T, schedule as S
cfg = M.DenoiserConfig(mlp_ratio=2)
p = M.init_params(cfg, 0)
sched = S.build_schedule()
rng = np.random.default_rng(0)
x = rng.standard_normal((32, cfg.H, cfg.transition_dim))
ret = rng.random(32)
import xted.numerics as nx
opt = nx.AdamState.for_params(p.tensors, 1e-3)
def one():
    s = T.draw_loss_sample(32, cfg.H, cfg.transition_dim, 200, 0.25, rng)
    with nx.Graph() as g:
        g.backward(T.diffusion_loss(x, ret, p, sched, s))
    grads = {k: t.grad for k, t in p.tensors.items()}
    nx.zero_grad(p.values())
    nx.adam_step(p.tensors, grads, opt)
one()
t = time.perf_counter()
for _ in range(N_STEPS):
    one()
print(kernels.BACKEND, (time.perf_counter() - t) / N_STEPS * 1e3)
"""


def train_step_ms(pure, n):
    env = dict(os.environ, XTED_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_STEP.replace("N_STEPS", str(n))], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--train-steps", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<22}{t_py:>10.3f}{'-':>11}{'-':>9}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_py:>10.3f}{t_c:>11.3f}{t_py / t_c:>8.2f}x")
    print()
    for pure in (True, False):
        backend, ms = train_step_ms(pure, args.train_steps)
        print(f"denoiser train step (B=32), backend={backend}: {ms:.1f} ms")


if __name__ == "__main__":
    main()
