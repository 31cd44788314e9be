"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each backend runs in its own subprocess because the backend is fixed at
import time by ``DCC_KERNELS``. Numba compile time is excluded by a warm-up
call.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from dcc import kernels, models, condenser as cd, data
from dcc import autodiff as ad

rep = int(sys.argv[1])
r = np.random.default_rng(0)
x = r.normal(size=(64, 16, 16, 16)).astype(np.float32)
cols = kernels.im2col(x, 3, 1)
R, C = r.normal(size=(2, 2)), np.eye(2)
lam, s0 = np.array([0.01, 0.01]), np.zeros((2, 2))
ds = data.make_finegrained(n_per_class=64, n_test_per_class=8)
cfg = cd.CondenseConfig(K_o=1, gamma_o=0, K_i=1, T=1, ipc=10, real_batch_per_class=32,
                        model_hyper={"width": 16, "depth": 2}, gram_every=0)

def bench(fn):
    fn()
    ts = []
    for _ in range(rep):
        t = time.perf_counter(); fn(); ts.append(time.perf_counter() - t)
    return 1e3 * float(np.median(ts))

out = {
    "im2col 64x16x16x16 k3": bench(lambda: kernels.im2col(x, 3, 1)),
    "col2im 64x16x16x16 k3": bench(lambda: kernels.col2im(cols, 16, 16, 1)),
    "ball_pgd 2x2 2000 steps": bench(lambda: kernels.ball_pgd(R, C, lam, s0, 0.2, 1e-3, 2000, 0.0)),
    "condense step ipc10 w16 d2": bench(lambda: cd.condense(ds, cfg)),
}
print(json.dumps({"backend": kernels.BACKEND, "ms": out}))
"""


def run(backend, repeat):
    env = {**os.environ, "DCC_KERNELS": backend}
    r = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                       text=True, check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    res = {b: run(b, args.repeat)["ms"] for b in ("numpy", "numba")}
    print(f"{'kernel':30s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for k in res["numpy"]:
        a, b = res["numpy"][k], res["numba"][k]
        print(f"{k:30s} {a:10.3f} {b:10.3f} {a / b:8.2f}")


if __name__ == "__main__":
    main()
