"""Compare the compiled kernels against the pure-Python fallback.

Each case runs in a fresh interpreter so ``NGINLA_DISABLE_NUMBA`` takes effect
at import time. JIT compilation is excluded by a warm-up call.

    python benchmarks/bench_kernels.py [--groups 100] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys

_CASE = r"""
import json, sys, time
import numpy as np
from nginla import _kernels as K, bundled, sim
from nginla.linalg import cholesky
from nginla.mcmc import ChainConfig, run_chain
from nginla.model import build_precision
from nginla.near_gaussian import extend_model

groups, repeat = int(sys.argv[1]), int(sys.argv[2])
d = sim.simulate_survival(groups, 10, seed=0)
spec = bundled.survival_model(d.times, d.covariate, d.group)
Q = build_precision(extend_model(spec).base, np.array([0.0]))
b = np.ones(Q.dim)
cfg = ChainConfig(iterations=200, burn_in=50, thinning=1, seed=0)


def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


out = {
    "numba": K.USE_NUMBA,
    "sparse_cholesky_solve": best(lambda: cholesky(Q, method="sparse").solve(b)),
    "dense_cholesky_solve": best(lambda: cholesky(Q, method="dense").solve(b)),
    "metropolis_200_sweeps": best(lambda: run_chain(spec, cfg)),
}
print(json.dumps(out))
"""


def run(disable, groups, repeat):
    env = dict(os.environ, NGINLA_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", _CASE, str(groups), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    jit = run(False, args.groups, args.repeat)
    py = run(True, args.groups, args.repeat)
    if not jit["numba"]:
        print("numba is not available; both columns use the fallback")
    print(f"{'case':<26}{'numba [s]':>12}{'python [s]':>12}{'speed-up':>10}")
    for key in ("sparse_cholesky_solve", "dense_cholesky_solve", "metropolis_200_sweeps"):
        print(f"{key:<26}{jit[key]:>12.4f}{py[key]:>12.4f}{py[key] / jit[key]:>10.1f}")


if __name__ == "__main__":
    main()
