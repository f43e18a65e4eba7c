"""Compare the numba rollout with the pure-numpy fallback.

Each backend runs in its own interpreter because the backend is chosen at
import time from OCCSAFE_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--trials 200] [--repeats 3]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from occsafe.config import ExperimentConfig, GridSpec, RiskConfig
from occsafe.controllers import make_controller, estimation_controller
from occsafe.risk import build_risk_table
from occsafe.sampling import spawn_step_matrix
from occsafe.world import world_vector, n_steps_for
from occsafe import kernels as K

n, repeats = int(sys.argv[1]), int(sys.argv[2])
cfg = ExperimentConfig()
sc = cfg.scenario
table = build_risk_table(sc, GridSpec(-180.0, 0.0, 10.0, 0.0, 10.0, 2.0), 20, 10.0, 0)
world = world_vector(sc)
cases = {
    "estimation_T10": (estimation_controller(sc, 6.0), -30.0, 6.0, 10.0),
    "proposed_T120": (make_controller("proposed", cfg, 8.0, 0.1, table), -120.0, 3.0, 120.0),
    "pid_T120": (make_controller("pid", cfg, 8.0), -120.0, 6.0, 120.0),
}
out = {}
for name, (ctrl, p0, v0, horizon) in cases.items():
    spawn = spawn_step_matrix(sc, 1, n, horizon)
    args = (np.full(n, p0), np.full(n, v0), np.full(n, ctrl.v_target), spawn, n_steps_for(horizon, sc.dt), world,
            ctrl.kernel_vector(sc), *ctrl.kernel_table())
    K.rollout_batch(*args)  # compile / warm caches
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        safe, t_end, _ = K.rollout_batch(*args)
        best = min(best, time.perf_counter() - t0)
    out[name] = {"seconds": best, "p_safe": float(safe.mean()), "mean_t": float(t_end.mean())}
print(json.dumps(out))
"""


def run(backend: str, trials: int, repeats: int) -> dict:
    env = dict(os.environ)
    env["OCCSAFE_DISABLE_NUMBA"] = "1" if backend == "numpy" else "0"
    res = subprocess.run([sys.executable, "-c", WORKER, str(trials), str(repeats)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    numba_res = run("numba", args.trials, args.repeats)
    numpy_res = run("numpy", args.trials, args.repeats)
    print(f"{'case':<16} {'numba s':>10} {'numpy s':>10} {'speedup':>8}  results equal")
    for name in numba_res:
        a, b = numba_res[name], numpy_res[name]
        same = a["p_safe"] == b["p_safe"] and a["mean_t"] == b["mean_t"]
        print(f"{name:<16} {a['seconds']:10.4f} {b['seconds']:10.4f} {b['seconds'] / a['seconds']:8.1f}x  {same}")


if __name__ == "__main__":
    main()
