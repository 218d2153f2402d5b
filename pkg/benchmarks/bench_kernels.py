"""Throughput of the compiled and pure-Python trajectory kernels.

Usage: python3 benchmarks/bench_kernels.py [--cycles N] [--repeat K] [--trap]

Both kernels integrate the same trajectory through a degree-4 field cache;
the script reports steps per second, the speed-up and the largest position
difference between the two.  ``--trap`` uses the default trap layout
instead of an ideal quadrupole.
"""
import argparse
import math
import time

import numpy as np

from fibertrap.dynamics import KERNELS, FieldCache, IntegratorSettings, integrate
from fibertrap.fields import SR88, DriveConfig, IdealQuadrupole, find_node, get_basis
from fibertrap.geometry import build_paper_trap

OMEGA = 2 * math.pi * 6e6


def setup(trap_layout):
    if trap_layout:
        basis = get_basis(build_paper_trap())
        drive = DriveConfig(omega_rf=OMEGA, v1=125.0, dc_voltages={"DC_XP": 0.5})
        center = find_node(basis, drive.replace(dc_voltages={}), (0.0, -3.5e-4, 6e-4))
        return basis, drive, FieldCache(basis, center), center
    trap = IdealQuadrupole(dc={"DCZ": {"gradient": (0.0, 0.0, 1.0)}})
    v1 = 0.2 * SR88.mass * trap.r0**2 * OMEGA**2 / (2 * SR88.charge)
    drive = DriveConfig(omega_rf=OMEGA, v1=v1, dc_voltages={"DCZ": -5.0})
    return trap, drive, FieldCache(trap, trap.center), trap.center


def run(kernel, basis, drive, cache, center, cycles):
    init = (center + np.array([1e-7, -2e-7, 3e-7]), np.array([0.1, 0.0, -0.2]))
    t0 = time.perf_counter()
    tr = integrate(basis, drive, SR88, init, 1e4, cycles * 2 * math.pi / OMEGA, cache=cache, kernel=kernel)
    return time.perf_counter() - t0, tr


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cycles", type=int, default=200)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--trap", action="store_true")
    args = p.parse_args()
    basis, drive, cache, center = setup(args.trap)
    steps = args.cycles * IntegratorSettings().steps_per_cycle
    best, traj = {}, {}
    for name in sorted(KERNELS):
        run(name, basis, drive, cache, center, 2)  # warm-up
        times = []
        for _ in range(args.repeat):
            dt, tr = run(name, basis, drive, cache, center, args.cycles)
            times.append(dt)
        best[name], traj[name] = min(times), tr
        print(f"{name:>9}: {best[name]:8.3f} s  {steps / best[name]:12.0f} steps/s")
    if len(best) == 2:
        diff = np.max(abs(traj["python"].positions - traj["compiled"].positions))
        print(f"speed-up: {best['python'] / best['compiled']:.1f}x; max position difference {diff:.2e} m")
    else:
        print("compiled kernel not built; only the Python fallback was timed")


if __name__ == "__main__":
    main()
