#!/usr/bin/env python3
"""Compiled-kernel vs pure-Python backend timings.

Runs the hot loops (DVI Newton stepping, RK4 composition, adaptive
reference solve) on the analytic models through both backends and prints a
speedup table. The compiled path must be built (`pip install -e .`); the
pure path is always available.
"""

import time

import numpy as np

from degenlag import _kernels
from degenlag.core import PhaseState
from degenlag.integrate import reference_solve, simulate
from degenlag.models import GuidingCenterModel, LotkaVolterraModel, MasslessParticleModel


def timed(fn, repeat=3):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


BENCHES = [
    (
        "LV DVI 20k steps (h=0.2)",
        lambda backend: simulate(
            LotkaVolterraModel(), PhaseState([1.0], [1.0]), 0.2, 20_000,
            scheme="dvi", backend=backend, record_every=100,
        ),
    ),
    (
        "LV RK4 100k steps (h=0.1)",
        lambda backend: simulate(
            LotkaVolterraModel(), PhaseState([1.0], [1.0]), 0.1, 100_000,
            scheme="rk4", backend=backend, record_every=500,
        ),
    ),
    (
        "MCP DVI 2k steps (h=0.5)",
        lambda backend: simulate(
            MasslessParticleModel(), PhaseState([0.0], [2.5]), 0.5, 2_000,
            scheme="dvi", backend=backend, record_every=10,
        ),
    ),
    (
        "GC DVI 2k steps (h=T_DT/20)",
        lambda backend: simulate(
            GuidingCenterModel(), PhaseState([0.0, 0.0], [0.05, -4.306e-4]),
            37974.6 / 20.0, 2_000, scheme="dvi", backend=backend, record_every=10,
        ),
    ),
    (
        "GC reference solve (5 T_DT)",
        lambda backend: reference_solve(
            GuidingCenterModel(), PhaseState([0.0, 0.0], [0.05, -4.306e-4]),
            (0.0, 5 * 37974.6), t_eval=[0.0, 5 * 37974.6], backend=backend,
        ),
    ),
]


def main():
    if not _kernels.compiled_available():
        print("compiled backend unavailable; nothing to compare")
        return
    print(f"{'benchmark':36s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, make in BENCHES:
        t_py, out_py = timed(lambda: make("python"), repeat=1)
        t_cy, out_cy = timed(lambda: make("compiled"), repeat=3)
        drift = np.max(np.abs(out_py.states[-1] - out_cy.states[-1]))
        print(f"{name:36s} {t_py:9.3f}s {t_cy:9.3f}s {t_py / t_cy:7.1f}x   (endpoint diff {drift:.1e})")


if __name__ == "__main__":
    main()
