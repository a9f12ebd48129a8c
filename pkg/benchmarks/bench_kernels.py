"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 7] [--end-to-end]

Kernel timings use garnet-sized inputs (n=50, k=10, N=100,000).  With
``--end-to-end`` the script also trains one cell per algorithm in two fresh
interpreters, one with ``VAMLAB_NUMBA=0`` and one with ``VAMLAB_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vamlab import kernels
from vamlab._accel import NUMBA_AVAILABLE
from vamlab.mdp import GarnetSpec, generate_garnet, sample_transitions


def make_inputs(n=50, k=10, samples=100_000, seed=0):
    rng = np.random.default_rng(seed)
    mrp = generate_garnet(GarnetSpec(n=n, rho=0.5, seed=seed))
    data = sample_transitions(mrp, samples, seed)
    Phi = rng.normal(size=(n, k))
    Psi = 0.1 * rng.normal(size=(n, k))
    V = rng.normal(scale=10.0, size=n)
    C = np.ascontiguousarray(data.C01)
    cv = np.ascontiguousarray((C @ V)[None, :])
    cv2 = np.ascontiguousarray((C @ (V * V))[None, :])
    s1 = np.ascontiguousarray(C @ mrp.reward + 0.99 * data.C02 @ V)
    s2 = np.zeros(n)
    N = float(samples)
    S = kernels.NUMPY_KERNELS["softmax_rows"](Phi @ Psi.T)
    cdf = np.cumsum(mrp.transition, axis=1)
    states = rng.integers(n, size=samples)
    u = rng.random(samples)
    return {
        "softmax_rows": (Phi @ Psi.T,),
        "softmax_rows_vjp": (S, rng.normal(size=S.shape)),
        "sample_next": (cdf, states, u),
        "pair_counts": (data.x0, data.x1, n),
        "value_iteration": (mrp.transition, mrp.reward, 0.99, np.zeros(n), 100),
        "mle_value_grad": (Phi, Psi, C, N),
        "itervaml_value_grad": (Phi, Psi, V, data.c0, cv, cv2, N),
        "muzero_value_grad": (Phi, Psi, V, data.c0, s1, s2, N),
    }


def best_time(fn, args, repeat):
    number, _ = timeit.Timer(lambda: fn(*args)).autorange()
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def bench_kernels(repeat):
    inputs = make_inputs()
    print(f"{'kernel':<22}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>10}")
    for name, args in inputs.items():
        t_np = best_time(kernels.NUMPY_KERNELS[name], args, repeat)
        if NUMBA_AVAILABLE:
            kernels.NUMBA_KERNELS[name](*args)      # compile outside the timing
            t_nb = best_time(kernels.NUMBA_KERNELS[name], args, repeat)
            print(f"{name:<22}{t_np * 1e6:>14.1f}{t_nb * 1e6:>14.1f}{t_np / t_nb:>9.2f}x")
        else:
            print(f"{name:<22}{t_np * 1e6:>14.1f}{'n/a':>14}{'':>10}")


_TRAIN_SNIPPET = """
import time
from vamlab import backend_name
from vamlab.harness import ExperimentConfig, Job, run_job
cfg = ExperimentConfig()
run_job(Job(0.5, 10, "mle", 0), cfg)          # warm caches and JIT
for alg in cfg.algorithms:
    t = time.perf_counter()
    row = run_job(Job(0.5, 10, alg, 0), cfg)
    print(backend_name(), alg, f"{time.perf_counter() - t:.3f}", f"{row.mae:.6g}")
"""


def bench_end_to_end():
    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, VAMLAB_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout
        for line in out.splitlines():
            backend, alg, secs, mae = line.split()
            results[(backend, alg)] = (float(secs), mae)
    print(f"\n{'algorithm':<14}{'numpy (s)':>11}{'numba (s)':>11}{'speedup':>9}  mae (numpy / numba)")
    for alg in ("itervaml", "mle", "muzero_joint", "muzero_td"):
        t_np, m_np = results[("numpy", alg)]
        t_nb, m_nb = results.get(("numba", alg), (float("nan"), "n/a"))
        print(f"{alg:<14}{t_np:>11.3f}{t_nb:>11.3f}{t_np / t_nb:>8.2f}x  {m_np} / {m_nb}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
