"""Proof-of-Stake coin dynamics without trading (a time-dependent Polya urn).

At step t the miner holding share ``pi_{k,t-1}`` is selected with that
probability and receives ``R_t`` coins, so ``N_t = N_{t-1} + R_t``.  Coins are
real numbers throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import rng as _rng
from .errors import InvalidDistributionError, InvalidParameterError, RewardOverflowError
from .kernels.urn import gamma_variates, urn_ensemble

SHARE_TOL = 1e-9

# --------------------------------------------------------------------------
# reward schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    R: float

    def __post_init__(self):
        _positive("R", self.R)


@dataclass(frozen=True)
class DecreasingToLimit:
    """``R_t = Rbar + (R0 - Rbar) exp(-rate t)``; nonincreasing with limit Rbar.

    One concrete member of the class of schedules that decrease to a positive
    floor.
    """

    R0: float
    Rbar: float
    rate: float

    def __post_init__(self):
        _positive("R0", self.R0)
        _positive("rate", self.rate)
        if not (0.0 <= self.Rbar <= self.R0):
            raise InvalidParameterError("DecreasingToLimit needs 0 <= Rbar <= R0")


@dataclass(frozen=True)
class PowerDecay:
    """``R_t = c (t+1)^(-alpha)``."""

    c: float
    alpha: float

    def __post_init__(self):
        _positive("c", self.c)
        _positive("alpha", self.alpha)


@dataclass(frozen=True)
class Geometric:
    """``R_t = rho N_{t-1}^gamma``."""

    rho: float
    gamma: float

    def __post_init__(self):
        _positive("rho", self.rho)
        _positive("gamma", self.gamma)


RewardSchedule = Union[Constant, DecreasingToLimit, PowerDecay, Geometric]

SCHEDULE_KINDS = {
    "constant": Constant,
    "decreasing": DecreasingToLimit,
    "power": PowerDecay,
    "geometric": Geometric,
}


def _positive(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise InvalidParameterError(f"{name} must be a positive finite number, got {value!r}")


def reward_at(schedule: RewardSchedule, t: int, prev_volume: float) -> float:
    """Reward ``R_t`` paid at step ``t >= 1`` given ``N_{t-1}``."""
    if t < 1:
        raise InvalidParameterError(f"reward step must be >= 1, got {t}")
    if not prev_volume > 0:
        raise InvalidParameterError(f"previous volume must be positive, got {prev_volume}")
    if isinstance(schedule, Constant):
        value = float(schedule.R)
    elif isinstance(schedule, DecreasingToLimit):
        value = schedule.Rbar + (schedule.R0 - schedule.Rbar) * math.exp(-schedule.rate * t)
    elif isinstance(schedule, PowerDecay):
        value = schedule.c * (t + 1.0) ** (-schedule.alpha)
    elif isinstance(schedule, Geometric):
        try:
            value = schedule.rho * prev_volume**schedule.gamma
        except OverflowError:
            value = math.inf
    else:
        raise TypeError(f"unknown reward schedule {schedule!r}")
    if not math.isfinite(value) or not math.isfinite(prev_volume + value):
        raise RewardOverflowError(t, value)
    return value


def reward_path(schedule: RewardSchedule, initial_volume: float, horizon: int):
    """Deterministic rewards ``R_1..R_T`` and volumes ``N_0..N_T``.

    The volume path never depends on who wins, so it is shared by every
    trajectory of an ensemble.
    """
    rewards = np.empty(horizon)
    volumes = np.empty(horizon + 1)
    volumes[0] = initial_volume
    vol = float(initial_volume)
    for t in range(1, horizon + 1):
        r = reward_at(schedule, t, vol)
        vol = vol + r
        rewards[t - 1] = r
        volumes[t] = vol
    return rewards, volumes


# --------------------------------------------------------------------------
# chain state and single-trajectory simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainState:
    t: int
    coins: np.ndarray
    volume: float

    def __post_init__(self):
        coins = np.asarray(self.coins, dtype=np.float64)
        object.__setattr__(self, "coins", coins)
        if coins.ndim != 1 or coins.size == 0:
            raise InvalidParameterError("coins must be a nonempty vector")
        if np.any(coins < 0) or not np.all(np.isfinite(coins)):
            raise InvalidParameterError("coins must be finite and nonnegative")
        if not self.volume > 0:
            raise InvalidParameterError("volume must be positive")
        total = float(coins.sum())
        if abs(total - self.volume) > 1e-9 * self.volume:
            raise InvalidParameterError(
                f"sum(coins)={total!r} disagrees with volume={self.volume!r}"
            )

    @classmethod
    def initial(cls, coins) -> "ChainState":
        coins = np.asarray(coins, dtype=np.float64)
        return cls(0, coins, float(coins.sum()))

    @property
    def K(self) -> int:
        return self.coins.shape[0]

    @property
    def shares(self) -> np.ndarray:
        return self.coins / self.volume


@dataclass
class Trajectory:
    states: list
    winners: list
    seed: int
    index: int = 0

    def shares(self) -> np.ndarray:
        return np.array([s.shares for s in self.states])

    def volumes(self) -> np.ndarray:
        return np.array([s.volume for s in self.states])

    def write_csv(self, path) -> None:
        K = self.states[0].K
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "volume", "winner"] + [f"share_{k}" for k in range(K)])
            for i, s in enumerate(self.states):
                winner = -1 if i == 0 else self.winners[i - 1]
                w.writerow([s.t, fmt(s.volume), winner] + [fmt(x) for x in s.shares])


def fmt(x: float) -> str:
    return f"{x:.12g}"


def select_winner(shares, rng: _rng.Stream) -> int:
    """Inverse-CDF draw of a miner index from ``shares``.

    Consumes one uniform ``u`` and returns the first ``k`` with
    ``u < cumsum(shares)[k]``; zero-share miners are never chosen.
    """
    p = np.asarray(shares, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistributionError("shares must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidDistributionError("shares must be finite and nonnegative")
    total = float(p.sum())
    if abs(total - 1.0) > SHARE_TOL:
        raise InvalidDistributionError(f"shares sum to {total!r}, not 1")
    return _pick(np.cumsum(p), p, rng.uniform())


def _pick(cdf, p, u) -> int:
    k = int(np.count_nonzero(u >= cdf))
    if k == cdf.shape[0]:
        k = int(np.flatnonzero(p > 0)[-1])
    return k


def _advance(state: ChainState, schedule, rng):
    reward = reward_at(schedule, state.t + 1, state.volume)
    # same arithmetic as the batch kernels: cumulative sum of coins / volume
    p = state.coins / state.volume
    k = _pick(np.cumsum(p), p, rng.uniform())
    coins = state.coins.copy()
    coins[k] += reward
    return ChainState(state.t + 1, coins, state.volume + reward), k


def step(state: ChainState, schedule: RewardSchedule, rng: _rng.Stream) -> ChainState:
    """One protocol step: a miner is drawn by share and receives ``R_t``."""
    return _advance(state, schedule, rng)[0]


def simulate(initial: ChainState, schedule: RewardSchedule, horizon: int, seed: int,
             index: int = 0) -> Trajectory:
    """Simulate ``horizon`` steps on stream ``(seed, index)``.

    Trajectory ``index`` reproduces run ``index`` of :func:`ensemble` with the
    same seed.
    """
    if horizon < 0:
        raise InvalidParameterError("horizon must be >= 0")
    stream = _rng.Stream(seed, index)
    states = [initial]
    winners = []
    state = initial
    for _ in range(horizon):
        state, k = _advance(state, schedule, stream)
        states.append(state)
        winners.append(k)
    return Trajectory(states, winners, int(seed), int(index))


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------


@dataclass
class Ensemble:
    initial_coins: np.ndarray
    rewards: np.ndarray
    volumes: np.ndarray
    final_coins: np.ndarray
    record_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    recorded_shares: np.ndarray | None = None
    probe: int = 0

    @property
    def final_shares(self) -> np.ndarray:
        return self.final_coins / self.volumes[-1]

    def ratios(self, probe: int | None = None) -> np.ndarray:
        k = self.probe if probe is None else probe
        pi0 = self.initial_coins[k] / self.volumes[0]
        return self.final_shares[:, k] / pi0


def ensemble(initial_coins, schedule: RewardSchedule, horizon: int, runs: int, seed: int,
             *, probe: int = 0, record_steps=(), first_run: int = 0,
             backend: str | None = None) -> Ensemble:
    """Run ``runs`` independent trajectories from the same initial coins."""
    coins0 = np.asarray(initial_coins, dtype=np.float64)
    ChainState.initial(coins0)
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")
    rewards, volumes = reward_path(schedule, float(coins0.sum()), horizon)
    steps = np.array(sorted(int(s) for s in record_steps), dtype=np.int64)
    if steps.size and (steps[0] < 0 or steps[-1] > horizon):
        raise InvalidParameterError("record steps must lie in [0, horizon]")
    final, recorded = urn_ensemble(coins0, rewards, volumes, seed, runs,
                                   first_run=first_run, probe=probe,
                                   record_steps=steps, backend=backend)
    return Ensemble(coins0, rewards, volumes, final, steps,
                    recorded if steps.size else None, probe)


def share_variance(pi0: float, rewards, volumes) -> np.ndarray:
    """Exact ``Var(pi_t)`` for t = 0..T for any deterministic schedule.

    The increment of the share martingale has conditional variance
    ``(R_t/N_t)^2 pi(1-pi)`` and ``E[pi_t(1-pi_t)]`` shrinks by the factor
    ``1 - (R_t/N_t)^2`` each step.
    """
    q = (np.asarray(rewards) / np.asarray(volumes)[1:]) ** 2
    keep = np.concatenate([[1.0], np.cumprod(1.0 - q)])
    return pi0 * (1.0 - pi0) * (1.0 - keep)


# --------------------------------------------------------------------------
# limit laws
# --------------------------------------------------------------------------


def sample_dirichlet_limit(initial_coins, R: float, count: int, seed: int,
                           backend: str | None = None) -> np.ndarray:
    """``count`` draws of Dir(n_1/R, ..., n_K/R) as normalised Gamma variates."""
    coins = np.asarray(initial_coins, dtype=np.float64)
    if not (R > 0) or np.any(coins <= 0):
        raise InvalidParameterError("Dirichlet limit needs R > 0 and all coins > 0")
    K = coins.shape[0]
    shapes = np.tile(coins / R, count)
    g = gamma_variates(shapes, seed, backend=backend).reshape(count, K)
    return g / g.sum(axis=1, keepdims=True)


def sample_gamma_ratio(n0: float, R: float, count: int, seed: int,
                       backend: str | None = None) -> np.ndarray:
    """Samples of the small-miner limit ratio ``(R/n0) Gamma(n0/R)``."""
    if not (n0 > 0 and R > 0):
        raise InvalidParameterError("gamma ratio needs n0 > 0 and R > 0")
    g = gamma_variates(np.full(count, n0 / R), seed, backend=backend)
    return (R / n0) * g


def write_samples_csv(path, samples) -> None:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_idx"] + [f"value_{k}" for k in range(arr.shape[1])])
        for i, row in enumerate(arr):
            w.writerow([i] + [fmt(x) for x in row])
