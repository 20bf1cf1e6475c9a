"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--steps N] [--candidates M] [--qubits n]
"""

import argparse
import json
import time

import numpy as np

from spinfilter import kernels
from spinfilter.sde import wiener_path
from spinfilter.spin import scs_state
from spinfilter.trajectory import sample_control


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--candidates", type=int, default=250)
    p.add_argument("--qubits", type=int, default=50)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    dt, tau = 1e-6, 5e-3
    spg = int(round(tau / dt))
    control = sample_control(0, max(1, args.steps // spg), tau)
    dy = wiener_path(1, args.steps, dt).increments
    x0 = np.random.default_rng(2).normal(size=(args.candidates, 3))
    x0 *= 0.75 / np.linalg.norm(x0, axis=1)[:, None]
    psi0 = scs_state(np.pi / 2, 0.0, args.qubits)

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    report = {}
    for name in backends:
        tf, fout = _best(lambda: kernels.filter_batch(dy, control.fields, spg, x0, args.qubits, 1.0, dt,
                                                      backend=name), args.repeat)
        tc, cout = _best(lambda: kernels.cse_trajectory(psi0, args.qubits, 1.0, dt, control.fields, spg, dy,
                                                        log_every=100, backend=name), args.repeat)
        report[name] = {"filter_s": tf, "filter_ns_per_candidate_step": 1e9 * tf / (args.steps * args.candidates),
                        "cse_s": tc, "cse_us_per_step": 1e6 * tc / args.steps,
                        "_qv": fout["qv"][:, -1], "_psi": cout[0]}
    if len(backends) == 2:
        py, cy = report["python"], report["cython"]
        report["speedup_filter"] = py["filter_s"] / cy["filter_s"]
        report["speedup_cse"] = py["cse_s"] / cy["cse_s"]
        report["max_qv_difference"] = float(np.max(np.abs(py["_qv"] - cy["_qv"])))
        report["max_state_difference"] = float(np.max(np.abs(py["_psi"] - cy["_psi"])))
    for name in backends:
        del report[name]["_qv"], report[name]["_psi"]
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
