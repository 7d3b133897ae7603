"""Compare the compiled and pure-Python backends on the particle filter.

Each backend runs in its own interpreter (``DYNTREE_BACKEND`` is read at
import) over the same seeded data.  The script reports wall time per
filtering step and checks that both produce the same log marginal
likelihood.

    python3 benchmarks/bench_kernels.py [--n 100] [--particles 1000] [--leaf constant]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from dyntree import BACKEND, Cloud, make_model, testfuncs

leaf, n, particles, reps = sys.argv[1], int(sys.argv[2]), int(sys.argv[3]), int(sys.argv[4])
name = "friedman" if leaf == "linear-5d" else "parabola"
kind = "linear" if leaf.startswith("linear") else leaf
f = testfuncs.get(name)
rng = np.random.default_rng(7)
X = f.uniform(n, rng)
y = f.sample(X, rng)
model = make_model(kind, f.d)
t0 = max(model.min_rows, model.default_t0())
times = []
for _ in range(reps):
    c = Cloud.from_arrays(X[:t0], y[:t0], model, n_particles=particles, seed=1, t0=t0)
    start = time.perf_counter()
    c.run(X[t0:], y[t0:])
    times.append(time.perf_counter() - start)
print(json.dumps({"backend": BACKEND, "best": min(times), "steps": n - t0, "log_ml": c.log_ml}))
"""


def run(backend: str, leaf: str, n: int, particles: int, reps: int) -> dict:
    env = dict(os.environ, DYNTREE_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", CHILD, leaf, str(n), str(particles), str(reps)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--leaf", nargs="+", default=["constant", "linear", "linear-5d"],
                   choices=["constant", "linear", "linear-5d"])
    args = p.parse_args(argv)
    print(f"{'leaf':<10} {'backend':<9} {'ms/step':>9} {'speedup':>8}  log_ml")
    for leaf in args.leaf:
        py = run("python", leaf, args.n, args.particles, args.reps)
        cc = run("compiled", leaf, args.n, args.particles, args.reps)
        for r in (py, cc):
            speed = py["best"] / r["best"]
            print(f"{leaf:<10} {r['backend']:<9} {1e3 * r['best'] / r['steps']:9.2f} {speed:8.1f}  {r['log_ml']:.10f}")
        if cc["backend"] == "python":
            print("  (compiled extension not built; both rows use the fallback)")
        elif abs(py["log_ml"] - cc["log_ml"]) > 1e-8 * max(1.0, abs(py["log_ml"])):
            print(f"  WARNING: backends disagree by {py['log_ml'] - cc['log_ml']:.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
