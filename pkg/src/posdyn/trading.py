"""Discrete-time coin trading on top of the PoS urn.

A focal miner trades ``nu_t`` coins at price ``P_t`` after each selection
round and may hold a risk-free bond ``b_t``.  The rest of the network is
lumped into one counterparty, which leaves the focal miner's selection law
unchanged.  The market value ``M_t = N_t P_t`` grows at ``1 + r_cryp`` in
expectation with multiplicative log-normal noise of mean exactly one.

Random layout per path ``i``: price noise ``xi_t`` is the ``t``-th Box-Muller
normal of stream ``(price_seed, i)`` and the selection uniform at step ``t``
is draw ``t`` of stream ``(select_seed, i)``.  Every strategy evaluated on a
path sees the same draws (common random numbers).
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .errors import FeasibilityError, InvalidParameterError, ShapeError
from .urn import Constant, RewardSchedule, fmt, reward_path

REGIME_TOL = 1e-12
FEAS_TOL = 1e-9

_PRICE, _SELECT, _STRATEGY = 1, 2, 3


class Regime(enum.Enum):
    NON_PARTICIPATION = "NonParticipation"
    INDIFFERENT = "Indifferent"
    BUY_OUT = "BuyOut"


class Strategy(enum.Enum):
    NON_PARTICIPATION = "NonParticipation"
    BUY_OUT = "BuyOut"
    NO_TRADE = "NoTrade"
    RANDOM_FEASIBLE = "RandomFeasible"


# The built-in strategy that is optimal in each regime.  At indifference every
# feasible strategy is optimal; BuyOut is designated so the dominance check
# still compares two different strategies.
DESIGNATED = {
    Regime.NON_PARTICIPATION: Strategy.NON_PARTICIPATION,
    Regime.INDIFFERENT: Strategy.BUY_OUT,
    Regime.BUY_OUT: Strategy.BUY_OUT,
}


def classify_regime(delta: float, r_cryp: float) -> Regime:
    if not 0.0 < delta <= 1.0:
        raise InvalidParameterError(f"delta={delta} must lie in (0, 1]")
    x = delta * (1.0 + r_cryp)
    if abs(x - 1.0) <= REGIME_TOL:
        return Regime.INDIFFERENT
    return Regime.BUY_OUT if x > 1.0 else Regime.NON_PARTICIPATION


@dataclass(frozen=True)
class TradingEnv:
    delta: float
    r_free: float
    r_cryp: float
    P0: float
    T: int
    s: float = 0.0
    coins: tuple = (1.0, 9.0)
    schedule: RewardSchedule = field(default_factory=lambda: Constant(1.0))
    miner: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coins", tuple(float(c) for c in self.coins))
        if not 0.0 < self.delta <= 1.0:
            raise InvalidParameterError(f"delta={self.delta} must lie in (0, 1]")
        if self.r_free < 0:
            raise InvalidParameterError("r_free must be >= 0")
        if self.r_cryp <= -1.0:
            raise InvalidParameterError("r_cryp must exceed -1")
        if not (self.P0 > 0 and math.isfinite(self.P0)):
            raise InvalidParameterError("P0 must be positive")
        if int(self.T) != self.T or self.T < 1:
            raise InvalidParameterError("horizon T must be an integer >= 1")
        if self.s < 0:
            raise InvalidParameterError("noise volatility s must be >= 0")
        if not self.coins or any(c < 0 for c in self.coins) or sum(self.coins) <= 0:
            raise InvalidParameterError("coins must be nonnegative with positive total")
        if not 0 <= self.miner < len(self.coins):
            raise InvalidParameterError("miner index out of range")

    @property
    def n0(self) -> float:
        return self.coins[self.miner]

    @property
    def N0(self) -> float:
        return float(sum(self.coins))

    @property
    def M0(self) -> float:
        return self.N0 * self.P0

    @property
    def growth(self) -> float:
        """``delta (1 + r_cryp)``, the quantity that fixes the regime."""
        return self.delta * (1.0 + self.r_cryp)

    @property
    def regime(self) -> Regime:
        return classify_regime(self.delta, self.r_cryp)

    def volumes(self):
        """(rewards R_1..R_T, volumes N_0..N_T)."""
        return reward_path(self.schedule, self.N0, int(self.T))


# --------------------------------------------------------------------------
# prices
# --------------------------------------------------------------------------


def _check_volumes(env, volumes):
    v = np.asarray(volumes, dtype=np.float64)
    if v.shape != (env.T + 1,):
        raise ShapeError(f"volume path must have length T+1={env.T + 1}")
    if np.any(v <= 0):
        raise InvalidParameterError("volume path must be positive")
    return v


def _market_factors(env, xi):
    steps = np.arange(1, env.T + 1)
    growth = (1.0 + env.r_cryp) ** steps
    return growth * np.cumprod(xi, axis=-1)


def price_path(env: TradingEnv, volumes, stream: _rng.Stream) -> np.ndarray:
    """One price path ``P_0..P_T`` with ``M_t = M_0 (1+r)^t prod xi_s``."""
    v = _check_volumes(env, volumes)
    z = np.array([stream.normal() for _ in range(env.T)])
    xi = np.exp(env.s * z - 0.5 * env.s**2)
    P = np.empty(env.T + 1)
    P[0] = env.P0
    P[1:] = env.N0 * env.P0 * _market_factors(env, xi) / v[1:]
    return P


def price_paths(env: TradingEnv, volumes, seed: int, paths: int, first: int = 0) -> np.ndarray:
    """``(paths, T+1)`` price array; row ``i`` equals ``price_path`` on stream ``first+i``."""
    v = _check_volumes(env, volumes)
    keys = _rng.stream_keys(seed, np.arange(first, first + paths))
    z = np.column_stack([_rng.normals(keys, 2 * t - 1) for t in range(1, env.T + 1)])
    xi = np.exp(env.s * z - 0.5 * env.s**2)
    P = np.empty((paths, env.T + 1))
    P[:, 0] = env.P0
    P[:, 1:] = env.N0 * env.P0 * _market_factors(env, xi) / v[1:]
    return P


# --------------------------------------------------------------------------
# wealth bookkeeping
# --------------------------------------------------------------------------


def pi_process(coins_excl_trade, trades, prices, delta: float) -> np.ndarray:
    """``Pi_t = delta^t n'_t P_t - sum_{j<t} delta^j nu_j P_j`` for t = 0..tau.

    All inputs are indexed by time starting at 0, with ``coins_excl_trade[0]``
    the initial holding and ``trades[0]`` ignored.
    """
    n = np.asarray(coins_excl_trade, dtype=np.float64)
    nu = np.asarray(trades, dtype=np.float64)
    P = np.asarray(prices, dtype=np.float64)
    if not n.shape == nu.shape == P.shape or n.ndim != 1:
        raise ShapeError("coins, trades and prices must be 1-d of equal length")
    disc = delta ** np.arange(n.size)
    spent = disc * nu * P
    spent[0] = 0.0
    paid = np.concatenate(([0.0], np.cumsum(spent)[:-1]))
    return disc * n * P - paid


@dataclass(frozen=True)
class StrategyPath:
    """Trades and bond holdings for t = 1..exit (index 0 is time 1).

    ``trades[exit-1]`` and ``bonds[exit-1]`` must be zero: the miner
    liquidates at exit.  ``exit = 0`` is non-participation.
    """

    trades: np.ndarray
    bonds: np.ndarray
    exit: int

    def __post_init__(self):
        tr = np.asarray(self.trades, dtype=np.float64)
        bo = np.asarray(self.bonds, dtype=np.float64)
        if tr.shape != (self.exit,) or bo.shape != (self.exit,):
            raise ShapeError("trades and bonds must have length exit")
        object.__setattr__(self, "trades", tr)
        object.__setattr__(self, "bonds", bo)


def holdings(env: TradingEnv, strategy: StrategyPath, wins, rewards=None, volumes=None):
    """Coins before trading ``n'_t`` for t = 0..exit, checking feasibility."""
    if rewards is None or volumes is None:
        rewards, volumes = env.volumes()
    tau = strategy.exit
    if tau > env.T:
        raise FeasibilityError("exit", tau, f"exit {tau} beyond horizon {env.T}")
    w = np.asarray(wins, dtype=bool)
    if w.shape[0] < tau:
        raise ShapeError("wins must cover every step up to exit")
    if tau and (strategy.trades[-1] != 0.0 or strategy.bonds[-1] != 0.0):
        raise FeasibilityError("C3", tau, "no trade or bond holding at exit")
    n_prime = np.empty(tau + 1)
    n_prime[0] = env.n0
    n = env.n0
    for t in range(1, tau + 1):
        n_prime[t] = n + rewards[t - 1] * w[t - 1]
        nu = strategy.trades[t - 1]
        if strategy.bonds[t - 1] < 0:
            raise FeasibilityError("C2", t, "bond holding must be nonnegative")
        n = n_prime[t] + nu
        slack = FEAS_TOL * volumes[t]
        if n < -slack:
            raise FeasibilityError("C2", t, f"sells {-nu} coins but holds {n_prime[t]}")
        if n > volumes[t] + slack:
            raise FeasibilityError("C2", t, f"would own {n} of {volumes[t]} coins")
    return n_prime


def cash_flows(strategy: StrategyPath, n_prime, prices, r_free: float) -> np.ndarray:
    """Consumption ``c_1..c_tau`` from the budget and liquidation equations."""
    tau = strategy.exit
    c = np.empty(tau)
    b_prev = 0.0
    for t in range(1, tau + 1):
        b, nu = strategy.bonds[t - 1], strategy.trades[t - 1]
        if t < tau:
            c[t - 1] = (1.0 + r_free) * b_prev - b - nu * prices[t]
        else:
            c[t - 1] = (1.0 + r_free) * b_prev + n_prime[t] * prices[t]
        b_prev = b
    return c


def utility(strategy: StrategyPath, prices, wins, env: TradingEnv) -> float:
    """Realised discounted consumption, via the mark-to-market decomposition.

    Equals ``sum_t delta^t c_t`` but is split into the wealth process at exit
    plus a bond term that is never positive when ``delta (1 + r_free) <= 1``.
    """
    P = np.asarray(prices, dtype=np.float64)
    if strategy.exit == 0:
        return env.n0 * P[0]
    tau = strategy.exit
    n_prime = holdings(env, strategy, wins)
    nu = np.concatenate(([0.0], strategy.trades))
    wealth = pi_process(n_prime, nu, P[: tau + 1], env.delta)[tau]
    disc = env.delta ** np.arange(1, tau)
    bond = np.sum(disc * ((1.0 + env.r_free) * env.delta - 1.0) * strategy.bonds[:-1])
    return float(wealth + bond)


def direct_utility(strategy: StrategyPath, prices, wins, env: TradingEnv) -> float:
    if strategy.exit == 0:
        return env.n0 * float(prices[0])
    n_prime = holdings(env, strategy, wins)
    c = cash_flows(strategy, n_prime, prices, env.r_free)
    return float(np.sum(env.delta ** np.arange(1, strategy.exit + 1) * c))


# --------------------------------------------------------------------------
# built-in strategies over many paths
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PathBatch:
    prices: np.ndarray  # (paths, T+1)
    wins: np.ndarray  # (paths, T) bool
    trades: np.ndarray  # (paths, T); trades[:, t-1] is nu_t
    utilities: np.ndarray  # (paths,)


def random_fractions(seed: int, index: int, T: int) -> np.ndarray:
    """Target ownership fractions ``u_t`` of RandomFeasible strategy ``index``."""
    s = _rng.Stream(_rng.derive_seed(seed, _STRATEGY), index)
    return np.array([s.uniform() for _ in range(T)])


def simulate_strategy(kind: Strategy, env: TradingEnv, seed: int, paths: int, *,
                      first: int = 0, index: int = 0) -> PathBatch:
    """Play one built-in strategy on ``paths`` price/selection paths (b = 0).

    RandomFeasible number ``index`` targets ownership ``u_t N_t`` at each
    t < T, i.e. ``nu_t`` is uniform on ``[-n'_t, N_t - n'_t]``, the widest
    range that keeps holdings in [0, N_t].
    """
    kind = Strategy(kind)
    T = int(env.T)
    rewards, volumes = env.volumes()
    P = price_paths(env, volumes, _rng.derive_seed(seed, _PRICE), paths, first)
    keys = _rng.stream_keys(_rng.derive_seed(seed, _SELECT), np.arange(first, first + paths))
    wins = np.zeros((paths, T), dtype=bool)
    trades = np.zeros((paths, T))
    if kind is Strategy.NON_PARTICIPATION:
        return PathBatch(P, wins, trades, np.full(paths, env.n0 * env.P0))
    frac = random_fractions(seed, index, T) if kind is Strategy.RANDOM_FEASIBLE else None
    n = np.full(paths, env.n0)
    spent = np.zeros(paths)
    for t in range(1, T + 1):
        u = _rng.uniforms(keys, t)
        wins[:, t - 1] = u < n / volumes[t - 1]
        n_prime = n + rewards[t - 1] * wins[:, t - 1]
        if t == T:
            nu = np.zeros(paths)
        elif kind is Strategy.BUY_OUT:
            nu = volumes[t] - n_prime if t == 1 else np.zeros(paths)
        elif kind is Strategy.RANDOM_FEASIBLE:
            nu = frac[t - 1] * volumes[t] - n_prime
        else:
            nu = np.zeros(paths)
        trades[:, t - 1] = nu
        spent += env.delta**t * nu * P[:, t]
        n = n_prime + nu
    util = env.delta**T * n_prime * P[:, T] - spent
    return PathBatch(P, wins, trades, util)


def run_builtin_strategy(kind: Strategy, env: TradingEnv, seed: int, path: int = 0) -> float:
    """Realised utility of one built-in strategy on a single path."""
    return float(simulate_strategy(kind, env, seed, 1, first=path).utilities[0])


def expected_utility(kind: Strategy, env: TradingEnv) -> float:
    """Closed-form mean utility of the deterministic built-ins (b = 0)."""
    kind = Strategy(kind)
    x, T = env.growth, int(env.T)
    if kind is Strategy.NON_PARTICIPATION:
        return env.n0 * env.P0
    if kind is Strategy.NO_TRADE:
        return env.n0 * env.P0 * x**T
    if kind is Strategy.BUY_OUT:
        buy = x * (1.0 - env.n0 / env.N0) if T > 1 else 0.0
        return env.M0 * (x**T - buy)
    raise InvalidParameterError("no closed form for RandomFeasible")


@dataclass(frozen=True)
class StrategyStats:
    name: str
    mean: float
    std_error: float


@dataclass(frozen=True)
class DominanceReport:
    regime: Regime
    designated: StrategyStats
    builtins: list
    randoms: list
    paths: int
    margins: list  # designated mean - random mean, in pooled standard errors

    @property
    def dominates(self) -> bool:
        return all(m >= -2.0 for m in self.margins)

    def indifferent_within(self, n0P0: float, k: float = 4.0) -> bool:
        return all(abs(s.mean - n0P0) <= k * s.std_error + 1e-12 * abs(n0P0)
                   for s in self.builtins)


def _stats(name, u):
    se = float(u.std(ddof=1) / math.sqrt(u.size)) if u.size > 1 else 0.0
    return StrategyStats(name, float(u.mean()), se)


def dominance_experiment(env: TradingEnv, seed: int, paths: int = 10_000,
                         n_random: int = 50, keep_paths: bool = False):
    """Compare the regime's designated strategy against random feasible ones.

    Returns the report and, with ``keep_paths``, a dict of per-path utilities
    keyed by strategy name.
    """
    regime = env.regime
    per_path = {}
    builtins = []
    for kind in (Strategy.NON_PARTICIPATION, Strategy.NO_TRADE, Strategy.BUY_OUT):
        u = simulate_strategy(kind, env, seed, paths).utilities
        per_path[kind.value] = u
        builtins.append(_stats(kind.value, u))
    designated = next(s for s in builtins if s.name == DESIGNATED[regime].value)
    randoms, margins = [], []
    for j in range(n_random):
        name = f"RandomFeasible_{j}"
        u = simulate_strategy(Strategy.RANDOM_FEASIBLE, env, seed, paths, index=j).utilities
        per_path[name] = u
        st = _stats(name, u)
        randoms.append(st)
        pooled = math.hypot(designated.std_error, st.std_error)
        gap = designated.mean - st.mean
        margins.append(gap / pooled if pooled > 0 else (math.inf if gap >= 0 else -math.inf))
    report = DominanceReport(regime, designated, builtins, randoms, paths, margins)
    return (report, per_path) if keep_paths else report


def write_utilities_csv(path, per_path: dict, regime: Regime) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_idx", "strategy", "regime", "utility"])
        for name, u in per_path.items():
            for i, val in enumerate(u):
                w.writerow([i, name, regime.value, fmt(val)])


def write_summary_json(path, report: DominanceReport) -> None:
    def row(s):
        return {"mean": float(fmt(s.mean)), "std_error": float(fmt(s.std_error)),
                "regime": report.regime.value}

    doc = {
        "regime": report.regime.value,
        "designated": report.designated.name,
        "paths": report.paths,
        "dominates": report.dominates,
        "strategies": {s.name: row(s) for s in report.builtins + report.randoms},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
