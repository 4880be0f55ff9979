"""Compare the compiled and numpy kernel backends.

Per-kernel timings use shapes from the 64x64 reference config (batch 2,
2 heads, 256 tokens). The end-to-end figure times full training steps of
the complete method in a fresh interpreter per backend, since the backend
is chosen once at import.

    python bench/bench_kernels.py [--steps N] [--repeat R]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from xda import _kernels_py

try:
    from xda import _ckernels
except ImportError:
    _ckernels = None

STEP_SCRIPT = """
import time
from dataclasses import replace
from xda import kernels
from xda.config import TrainConfig
from xda.train import Trainer
tr = Trainer(replace(TrainConfig(), iterations={steps}))
tr.step()
t = time.perf_counter()
for _ in range({steps}):
    tr.step()
print(kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def kernel_cases(dtype=np.float32, seed=0):
    rng = np.random.default_rng(seed)
    rows, n, dim, classes = 2 * 2 * 256, 256, 32, 4
    scores = rng.normal(size=(rows, n)).astype(dtype)
    probs = _kernels_py.softmax_fwd(scores, 1.0)
    g = rng.normal(size=(rows, n)).astype(dtype)
    x = rng.normal(size=(2 * 256, dim)).astype(dtype)
    gamma, beta = np.ones(dim, dtype), np.zeros(dim, dtype)
    _, xhat, rstd = _kernels_py.layernorm_fwd(x, gamma, beta, 1e-5)
    logits = rng.normal(size=(2 * 64 * 64, classes)).astype(dtype)
    target = np.eye(classes, dtype=dtype)[rng.integers(0, classes, size=len(logits))]
    weight = np.ones(len(logits), dtype)
    p = _kernels_py.softmax_fwd(rng.normal(size=(rows, n)).astype(dtype), 1.0)
    return {
        "softmax_fwd": (scores, 0.25),
        "softmax_bwd": (probs, g, 0.25),
        "layernorm_fwd": (x, gamma, beta, 1e-5),
        "layernorm_bwd": (x, xhat, rstd, gamma),
        "log_softmax_ce": (logits, target, weight),
        "kl_terms": (p, probs, 1e-8),
        "kl_grad_q": (p, probs, g, 1e-8),
    }


def time_kernels(repeat):
    results = []
    for name, args in kernel_cases().items():
        row = [name]
        for impl in (_kernels_py, _ckernels):
            if impl is None:
                row.append(float("nan"))
                continue
            fn = getattr(impl, name)
            row.append(min(timeit.repeat(lambda: fn(*args), number=20, repeat=repeat)) / 20)
        results.append(row)
    return results


def time_steps(steps):
    out = {}
    for pure in ("1", "0"):
        env = dict(os.environ, XDA_PURE_PYTHON=pure, XDA_THREADS="1", OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        backend, seconds = proc.stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20, help="training steps timed per backend")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'kernel':<16s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, py, cy in time_kernels(args.repeat):
        print(f"{name:<16s} {1e3 * py:10.3f} {1e3 * cy:10.3f} {py / cy:8.2f}")

    steps = time_steps(args.steps)
    print()
    print(f"{'backend':<16s} {'s / step':>10s}")
    for backend, sec in steps.items():
        print(f"{backend:<16s} {sec:10.4f}")
    if "cython" in steps:
        print(f"end-to-end speedup: {steps['python'] / steps['cython']:.2f}x")


if __name__ == "__main__":
    main()
