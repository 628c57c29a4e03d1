"""Time each compiled kernel against its numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3]

Prints the best wall time per backend and the speed-up.  The numba timings
exclude compilation (one warm-up call first).
"""

import argparse
import time

import numpy as np

from posdyn.hjb import GBM, ControlParams, solve_hjb
from posdyn.kernels.pde import transport
from posdyn.mfg import MfgParams, equilibrium_iterate
from posdyn.urn import Constant, ensemble, sample_gamma_ratio

HJB = ControlParams(alpha=1.0, N0=100.0, T=1.0, beta=0.05, ell=1.0, h=1.0, nubar=10.0,
                    x0=50.0, price=GBM(1.2, 0.3))
MFG = MfgParams(K=3, alpha=2.0, N0=100.0, T=10.0, Z0=25.0, eta=0.01, rho=25.0, P0=7.5,
                beta=0.05, ell=0.0, h=1.0)


def _transport_case(backend):
    J, M = 400, 400
    y = np.linspace(0.0, 1.0, J + 1)
    m0 = np.where((y > 0.3) & (y < 0.5), 5.0, 0.0)
    vel = np.tile(0.2 * np.sin(np.pi * y), (M, 1))
    return transport(1.0 / M, 1.0 / J, vel, m0, backend)


CASES = {
    "urn ensemble (2000 runs x 5000 steps)":
        lambda b: ensemble([1, 99], Constant(1.0), 5000, 2000, 0, backend=b),
    "gamma sampler (1e5 draws)": lambda b: sample_gamma_ratio(1.0, 1.0, 100_000, 0, backend=b),
    "bang-bang HJB (400 x 400)": lambda b: solve_hjb(HJB, 400, 400, backend=b),
    "transport (400 x 400)": _transport_case,
    "mean-field equilibrium (200 x 200)":
        lambda b: equilibrium_iterate(MFG, M=200, J=200, backend=b),
}


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'kernel':40s} {'numba s':>9s} {'numpy s':>9s} {'speed-up':>9s}")
    for name, case in CASES.items():
        case("numba")
        t_nb = best_time(lambda: case("numba"), args.repeat)
        t_np = best_time(lambda: case("numpy"), args.repeat)
        print(f"{name:40s} {t_nb:9.3f} {t_np:9.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
