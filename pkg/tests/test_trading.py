import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posdyn import rng
from posdyn.errors import FeasibilityError, InvalidParameterError, ShapeError
from posdyn.trading import (
    Regime,
    Strategy,
    StrategyPath,
    TradingEnv,
    classify_regime,
    direct_utility,
    dominance_experiment,
    expected_utility,
    pi_process,
    price_path,
    price_paths,
    run_builtin_strategy,
    simulate_strategy,
    utility,
    write_summary_json,
    write_utilities_csv,
)
from posdyn.urn import Constant


def env_for(delta=0.95, r_cryp=0.05, s=0.2, T=6, coins=(10.0, 90.0), r_free=0.0):
    return TradingEnv(delta=delta, r_free=r_free, r_cryp=r_cryp, P0=2.0, T=T, s=s,
                      coins=coins, schedule=Constant(1.0))


# -- regime --------------------------------------------------------------------


@pytest.mark.parametrize("delta,r,expected", [
    (0.9, 0.05, Regime.NON_PARTICIPATION),
    (1 / 1.05, 0.05, Regime.INDIFFERENT),
    (1.0, 0.05, Regime.BUY_OUT),
])
def test_classify_regime(delta, r, expected):
    assert classify_regime(delta, r) is expected


def test_classify_rejects_bad_delta():
    with pytest.raises(InvalidParameterError):
        classify_regime(1.2, 0.0)


# -- prices --------------------------------------------------------------------


def test_flat_prices_without_noise():
    env = env_for(r_cryp=0.0, s=0.0, T=5)
    P = price_path(env, np.full(6, env.N0), rng.Stream(0))
    np.testing.assert_allclose(P, env.P0, rtol=1e-15)


def test_price_with_doubling_volume():
    env = env_for(r_cryp=0.1, s=0.0, T=3)
    vols = env.N0 * 2.0 ** np.arange(4)
    P = price_path(env, vols, rng.Stream(0))
    assert P[1] == pytest.approx(env.P0 * 1.1 / 2, rel=1e-14)


def test_scalar_and_batch_prices_agree():
    env = env_for(T=8)
    _, vols = env.volumes()
    batch = price_paths(env, vols, 17, 5)
    for i in range(5):
        np.testing.assert_allclose(batch[i], price_path(env, vols, rng.Stream(17, i)),
                                   rtol=1e-14)


def test_market_value_growth_is_exact_in_mean():
    env = env_for(r_cryp=0.07, s=0.3, T=3)
    _, vols = env.volumes()
    P = price_paths(env, vols, 3, 100_000)
    M = P * vols
    ratio = M[:, 2] / M[:, 1]
    sd = ratio.std(ddof=1)
    assert abs(ratio.mean() - 1.07) <= 4 * sd / math.sqrt(ratio.size)
    assert np.all(P > 0)


def test_price_path_rejects_wrong_length():
    env = env_for(T=4)
    with pytest.raises(ShapeError):
        price_path(env, np.ones(3), rng.Stream(0))


# -- Pi process ------------------------------------------------------------------


def test_pi_static_portfolio():
    pi = pi_process([5.0] * 4, [0.0] * 4, [3.0] * 4, 1.0)
    np.testing.assert_allclose(pi, 15.0)


def test_pi_first_step_has_no_trade_term():
    pi = pi_process([2.0, 4.0], [0.0, 7.0], [1.0, 3.0], 0.9)
    assert pi[1] == pytest.approx(0.9 * 4.0 * 3.0)


def test_pi_unrolled_by_hand():
    d = 0.8
    n = [1.0, 2.0, 3.0, 4.0]
    nu = [0.0, 0.5, -1.0, 0.0]
    P = [1.0, 2.0, 1.5, 3.0]
    expected = d**3 * 4.0 * 3.0 - (d * 0.5 * 2.0 + d**2 * -1.0 * 1.5)
    assert pi_process(n, nu, P, d)[3] == pytest.approx(expected, rel=1e-14)


def test_pi_shape_error():
    with pytest.raises(ShapeError):
        pi_process([1.0, 2.0], [0.0], [1.0, 1.0], 1.0)


def test_pi_is_martingale_at_indifference():
    env = env_for(delta=1 / 1.05, r_cryp=0.05, s=0.25, T=6)
    b = simulate_strategy(Strategy.NO_TRADE, env, 4, 10_000)
    rewards, _ = env.volumes()
    n_prime = env.n0 + np.cumsum(b.wins * rewards, axis=1)
    pi = env.delta ** np.arange(1, env.T + 1) * n_prime * b.prices[:, 1:]
    for t in range(env.T):
        sd = pi[:, t].std(ddof=1)
        assert abs(pi[:, t].mean() - env.n0 * env.P0) <= 4 * sd / math.sqrt(pi.shape[0])


@pytest.mark.parametrize("delta,direction", [(0.9, -1), (1.0, 1)])
def test_pi_super_and_sub_martingale(delta, direction):
    env = env_for(delta=delta, r_cryp=0.05, s=0.25, T=8)
    b = simulate_strategy(Strategy.NO_TRADE, env, 5, 10_000)
    rewards, _ = env.volumes()
    n_prime = env.n0 + np.cumsum(b.wins * rewards, axis=1)
    pi = env.delta ** np.arange(1, env.T + 1) * n_prime * b.prices[:, 1:]
    means = np.concatenate(([env.n0 * env.P0], pi.mean(axis=0)))
    ses = np.concatenate(([0.0], pi.std(axis=0, ddof=1) / math.sqrt(pi.shape[0])))
    steps = direction * np.diff(means)
    assert np.all(steps >= -4 * np.hypot(ses[1:], ses[:-1]))


# -- utility ---------------------------------------------------------------------


def test_non_participation_utility():
    env = env_for()
    s = StrategyPath(np.zeros(0), np.zeros(0), 0)
    assert utility(s, [env.P0], [], env) == env.n0 * env.P0


def test_bonds_strictly_reduce_utility_when_discount_is_tight():
    env = env_for(delta=0.9, r_free=0.05, T=4)
    prices = [2.0, 2.1, 1.9, 2.2, 2.0]
    wins = [True, False, False, True]
    trades = [1.0, -2.0, 0.5, 0.0]
    base = utility(StrategyPath(trades, [0, 0, 0, 0], 4), prices, wins, env)
    bonded = utility(StrategyPath(trades, [3.0, 1.0, 0.0, 0.0], 4), prices, wins, env)
    assert bonded < base


@settings(max_examples=60, deadline=None)
@given(
    delta=st.floats(0.5, 1.0),
    r_free=st.floats(0.0, 0.2),
    fracs=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8),
    bonds=st.lists(st.floats(0.0, 50.0), min_size=8, max_size=8),
    seed=st.integers(0, 2**32),
)
def test_separability_identity(delta, r_free, fracs, bonds, seed):
    T = len(fracs)
    env = env_for(delta=delta, r_free=r_free, T=T)
    rewards, vols = env.volumes()
    s = rng.Stream(seed)
    prices = price_path(env, vols, s)
    wins = [s.uniform() < 0.3 for _ in range(T)]
    # build feasible trades from target fractions against the realised wins
    n, trades = env.n0, []
    for t in range(1, T + 1):
        n_prime = n + rewards[t - 1] * wins[t - 1]
        nu = 0.0 if t == T else fracs[t - 1] * vols[t] - n_prime
        trades.append(nu)
        n = n_prime + nu
    b = list(bonds[: T - 1]) + [0.0]
    strat = StrategyPath(trades, b, T)
    a = utility(strat, prices, wins, env)
    d = direct_utility(strat, prices, wins, env)
    assert a == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_feasibility_errors_name_constraint_and_step():
    env = env_for(T=3)
    prices = [2.0] * 4
    with pytest.raises(FeasibilityError) as e:
        utility(StrategyPath([-50.0, 0.0, 0.0], [0, 0, 0], 3), prices, [False] * 3, env)
    assert e.value.constraint == "C2" and e.value.step == 1
    with pytest.raises(FeasibilityError) as e:
        utility(StrategyPath([0.0, 500.0, 0.0], [0, 0, 0], 3), prices, [False] * 3, env)
    assert e.value.step == 2
    with pytest.raises(FeasibilityError) as e:
        utility(StrategyPath([0.0, 0.0, 1.0], [0, 0, 0], 3), prices, [False] * 3, env)
    assert e.value.constraint == "C3"
    with pytest.raises(FeasibilityError):
        utility(StrategyPath([0.0, 0.0, 0.0], [0, -1.0, 0], 3), prices, [False] * 3, env)


# -- built-in strategies ------------------------------------------------------------


def test_non_participation_builtin_is_exact():
    env = env_for()
    assert run_builtin_strategy(Strategy.NON_PARTICIPATION, env, 1) == env.n0 * env.P0


def test_buyout_with_single_miner_equals_no_trade():
    env = env_for(coins=(50.0,), T=7)
    a = simulate_strategy(Strategy.BUY_OUT, env, 3, 200).utilities
    b = simulate_strategy(Strategy.NO_TRADE, env, 3, 200).utilities
    np.testing.assert_allclose(a, b, rtol=1e-14)


@pytest.mark.parametrize("kind", [Strategy.BUY_OUT, Strategy.NO_TRADE, Strategy.RANDOM_FEASIBLE])
def test_batch_utilities_match_pathwise_accounting(kind):
    env = env_for(T=6)
    b = simulate_strategy(kind, env, 9, 20, index=3)
    for i in range(20):
        strat = StrategyPath(b.trades[i], np.zeros(env.T), env.T)
        u = utility(strat, b.prices[i], b.wins[i], env)
        assert u == pytest.approx(b.utilities[i], rel=1e-12)
        assert direct_utility(strat, b.prices[i], b.wins[i], env) == pytest.approx(u, rel=1e-9)


def test_single_path_equals_batch_row():
    env = env_for(T=5)
    batch = simulate_strategy(Strategy.RANDOM_FEASIBLE, env, 2, 10, index=1).utilities
    one = simulate_strategy(Strategy.RANDOM_FEASIBLE, env, 2, 1, first=7, index=1).utilities
    assert one[0] == batch[7]
    assert run_builtin_strategy(Strategy.NO_TRADE, env, 2, path=4) == \
        simulate_strategy(Strategy.NO_TRADE, env, 2, 10).utilities[4]


@pytest.mark.parametrize("delta", [0.9, 1 / 1.05, 1.0])
@pytest.mark.parametrize("kind", [Strategy.NO_TRADE, Strategy.BUY_OUT])
def test_closed_form_means(delta, kind):
    env = env_for(delta=delta, T=6, s=0.2)
    u = simulate_strategy(kind, env, 6, 20_000).utilities
    se = u.std(ddof=1) / math.sqrt(u.size)
    assert abs(u.mean() - expected_utility(kind, env)) <= 4 * se


def test_dominance_small_and_outputs(tmp_path):
    env = env_for(delta=1.0, T=5)
    rep, per_path = dominance_experiment(env, 0, paths=2000, n_random=5, keep_paths=True)
    assert rep.regime is Regime.BUY_OUT and rep.designated.name == "BuyOut"
    assert rep.dominates
    write_utilities_csv(tmp_path / "u.csv", per_path, rep.regime)
    write_summary_json(tmp_path / "s.json", rep)
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "path_idx,strategy,regime,utility"
    assert len(lines) == 1 + 2000 * 8


def test_env_validation():
    with pytest.raises(InvalidParameterError):
        env_for(delta=0.0)
    with pytest.raises(InvalidParameterError):
        env_for(T=0)
    with pytest.raises(InvalidParameterError):
        env_for(s=-0.1)
