#!/usr/bin/env python3
"""Time the closed-loop integrator: compiled extension vs pure Python.

    python benchmarks/bench_kernels.py [--repeat 5] [--seconds 4.0]

Both backends receive the same setpoint stream (a 4 s grasp-like sweep)
and must return identical arrays; the script checks that before timing.
"""
import argparse
import time

import numpy as np

from teleograsp import kernels
from teleograsp.teleop import DT, ArmModel, PDGains, fk


def make_inputs(seconds: float):
    arm, gains = ArmModel(), PDGains()
    n = int(seconds / DT)
    t = np.arange(n) * DT
    q0 = np.asarray(arm.q_start, dtype=float)
    s = np.clip(t / seconds, 0, 1)
    q_des = np.empty((n, 4))
    q_des[:, 0] = 0.1 * np.sin(2 * np.pi * s)
    q_des[:, 1] = q0[1] + 0.2 * s
    q_des[:, 2] = q0[2] + 0.02 * np.sin(np.pi * s)
    q_des[:, 3] = 1.2 * np.sin(np.pi * s) ** 2
    obj = fk(q0, arm) + np.array([0.04, 0.0, 0.0])
    return (np.ascontiguousarray(q_des), q0, np.zeros(4), arm.inertia, arm.damping, gains.kp, gains.kd,
            arm.q_lo, arm.q_hi, arm.tool_mass, arm.gravity, arm.gc_fidelity, DT, arm.remote_center, obj,
            arm.capture_radius, 0.8, arm.release_margin)


def bench(backend, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        kernels.simulate_arm(*args, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=4.0, help="simulated trial length, s")
    a = ap.parse_args()
    args = make_inputs(a.seconds)
    backends = kernels.available_backends()
    results = {b: kernels.simulate_arm(*args, backend=b) for b in backends}
    ref = results["python"]
    for b, out in results.items():
        same = all(np.array_equal(x, y) for x, y in zip(out[:3], ref[:3])) and out[3:] == ref[3:]
        print(f"{b:>9}: outputs identical to python backend: {same}")
    times = {b: bench(b, args, a.repeat) for b in backends}
    n = args[0].shape[0]
    for b, sec in times.items():
        print(f"{b:>9}: {sec * 1e3:8.2f} ms per {a.seconds:g} s trial ({n / sec / 1e6:6.2f} M ticks/s)")
    if "compiled" in times:
        print(f"speed-up: {times['python'] / times['compiled']:.1f}x")
    else:
        print("compiled extension not built; only the python backend was timed")


if __name__ == "__main__":
    main()
