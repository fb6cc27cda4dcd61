"""Time the numba kernels against their numpy fallbacks.

Each path runs in its own interpreter because the switch is read at import
time. Prints one row per kernel with both timings and the max abs
difference between the two outputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile

import numpy as np

WORKER = r"""
import json, sys, time
import numpy as np
from sharpdro import _jit, kernels, minimax

out_prefix, repeat = sys.argv[1], int(sys.argv[2])

def best_of(fn):
    fn()  # warm-up (includes compilation on the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = fn()
        times.append(time.perf_counter() - t0)
    return min(times), res

p = minimax.QuadraticCoupledProblem.default()
T, d = 200_000, p.dim_theta
rng = np.random.default_rng(0)
nh, nt, nw = (0.1 * rng.standard_normal((T, d)) for _ in range(3))
th0 = minimax.default_theta0(d)

cases = {
    "counter_uniform(1e6)": lambda: kernels.counter_uniform(7, "bench", 0, 1_000_000),
    "counter_normal(1e6)": lambda: kernels.counter_normal(7, "bench", 0, 1_000_000),
    "sgda_sam_loop(T=2e5)": lambda: kernels.sgda_sam_loop(
        p.H, p.a, p.A, p.mu, th0, np.zeros(d), 1e-3, 0.05, 3e-4, nh, nt, nw)[0],
}
timings = {}
for name, fn in cases.items():
    t, res = best_of(fn)
    timings[name] = t
    np.save(f"{out_prefix}_{name.split('(')[0]}.npy", np.asarray(res))
print(json.dumps({"numba": _jit.USING_NUMBA, "timings": timings}))
"""


def run_path(disable: bool, prefix: str, repeat: int) -> dict:
    env = dict(os.environ, SHARPDRO_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, prefix, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        fast = run_path(False, os.path.join(tmp, "nb"), args.repeat)
        slow = run_path(True, os.path.join(tmp, "np"), args.repeat)
        if not fast["numba"]:
            print("numba unavailable; both rows use the numpy path")
        print(f"{'kernel':24s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s} {'max |diff|':>11s}")
        for name, t_nb in fast["timings"].items():
            t_np = slow["timings"][name]
            key = name.split("(")[0]
            a = np.load(os.path.join(tmp, f"nb_{key}.npy"))
            b = np.load(os.path.join(tmp, f"np_{key}.npy"))
            diff = float(np.max(np.abs(a - b)))
            print(f"{name:24s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f} {diff:11.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
