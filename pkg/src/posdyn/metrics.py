"""Sample statistics, KS distances, histograms and phase-transition sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import EmptyInputError, InvalidParameterError, InvalidRangeError
from .urn import RewardSchedule, ensemble, fmt

DEFAULT_EPSILON = 0.5


@dataclass(frozen=True)
class SampleSummary:
    count: int
    mean: float
    variance: float
    tail_probs: dict


@dataclass(frozen=True)
class PhaseSweepRow:
    N: float
    n0: float
    epsilon: float
    dev_prob: float
    ratio_var: float
    runs: int


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([fmt(lo), fmt(hi), int(c)])


def _nonempty(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError("no samples")
    return x


def summarize(samples, thresholds=()) -> SampleSummary:
    x = _nonempty(samples)
    var = float(x.var(ddof=1)) if x.size > 1 else 0.0
    tails = {float(th): float(np.count_nonzero(x > th)) / x.size for th in thresholds}
    return SampleSummary(int(x.size), float(x.mean()), var, tails)


def ks_distance(samples, cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic ``sup |F_n - F|``.

    ``cdf`` is evaluated once on the sorted sample; the supremum is attained
    at a jump of the empirical CDF, either just before or at it.
    """
    x = np.sort(_nonempty(samples))
    n = x.size
    F = np.asarray(cdf(x), dtype=np.float64)
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max(), 0.0))


def histogram(samples, bin_count: int, value_range) -> Histogram:
    lo, hi = (float(v) for v in value_range)
    if bin_count < 1:
        raise InvalidParameterError("bin_count must be >= 1")
    if not hi > lo:
        raise InvalidRangeError(f"histogram range [{lo}, {hi}] is empty or inverted")
    x = np.asarray(samples, dtype=np.float64).ravel()
    counts, edges = np.histogram(x, bins=bin_count, range=(lo, hi))
    return Histogram(edges, counts, int(np.count_nonzero(x < lo)),
                     int(np.count_nonzero(x > hi)))


def phase_sweep(schedule: RewardSchedule, n0_grid, N_grid, epsilon: float = DEFAULT_EPSILON,
                horizon: int = 10_000, runs: int = 1000, seed: int = 0,
                backend: str | None = None) -> list[PhaseSweepRow]:
    """Stability of the ratio ``pi_t / pi_0`` over a grid of (N, n0).

    The probed miner holds ``n0`` coins and the rest of the network ``N - n0``;
    lumping the other miners together leaves the probe's law unchanged.
    """
    n0s = list(n0_grid)
    Ns = list(N_grid)
    if not n0s or not Ns:
        raise InvalidParameterError("sweep grids must be nonempty")
    if runs < 100:
        raise InvalidParameterError("phase sweep needs runs >= 100")
    rows = []
    for i, N in enumerate(Ns):
        for j, n0 in enumerate(n0s):
            n0v = float(n0(N)) if callable(n0) else float(n0)
            if not 0 < n0v < N:
                raise InvalidParameterError(f"n0={n0v} must lie in (0, N={N})")
            cell_seed = _rng.derive_seed(seed, i, j)
            ens = ensemble([n0v, N - n0v], schedule, horizon, runs, cell_seed,
                           backend=backend)
            ratio = ens.ratios(0)
            rows.append(PhaseSweepRow(
                N=float(N), n0=n0v, epsilon=float(epsilon),
                dev_prob=float(np.mean(np.abs(ratio - 1.0) > epsilon)),
                ratio_var=float(ratio.var(ddof=1)), runs=int(runs),
            ))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "n0", "epsilon", "dev_prob", "ratio_var", "runs"])
        for r in rows:
            w.writerow([fmt(r.N), fmt(r.n0), fmt(r.epsilon), fmt(r.dev_prob),
                        fmt(r.ratio_var), r.runs])
