import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posdyn.errors import (
    BoundaryEscapeError,
    InvalidDistributionError,
    InvalidParameterError,
    SupplyExhaustedError,
)
from posdyn.hjb import ValueGrid, volume_at, volume_rate
from posdyn.kernels.pde import transport
from posdyn.mfg import (
    MfgParams,
    aggregate_trade,
    equilibrium_iterate,
    impact_price_mean,
    initial_density,
    investor_holdings,
    make_grid,
    mass,
    optimal_control_field,
    solve_hjb_mfg,
    transport_density,
    write_outputs,
)

REFERENCE = dict(K=3, alpha=2.0, N0=100.0, T=10.0, Z0=25.0, eta=0.01, rho=25.0, P0=7.5,
                 beta=0.05, ell=0.0, h=1.0)


def params(**kw):
    return MfgParams(**{**REFERENCE, **kw})


@pytest.fixture(scope="module")
def reference_state():
    return equilibrium_iterate(params())


# -- parameters ------------------------------------------------------------------


def test_params_enforce_initial_clearing():
    with pytest.raises(InvalidParameterError):
        params(Z0=30.0)
    p = params(K=5, Z0=50.0, m0=((5.0, 15.0, 1.0),))
    assert p.initial_mean() == 10.0


@pytest.mark.parametrize("kw,err", [
    (dict(K=1), InvalidParameterError),
    (dict(rho=0.0), InvalidParameterError),
    (dict(eta=-1.0), InvalidParameterError),
    (dict(m0=((0.0, 50.0, 1.0),)), InvalidDistributionError),
    (dict(m0=()), InvalidDistributionError),
])
def test_params_validation(kw, err):
    with pytest.raises(err):
        params(**kw)


def test_initial_density_has_unit_mass_and_right_mean():
    p = params(K=5, Z0=16.875, m0=((10.0, 12.0, 1.0), (17.0, 20.0, 3.0)))
    g = make_grid(p, 10, 300)
    m = initial_density(p, g.y)
    assert mass(m, g.dy)[0] == pytest.approx(1.0, abs=1e-13)
    mean = aggregate_trade((g.y * p.N0)[None, :], m[None, :], g.dy)[0]
    assert mean == pytest.approx(p.initial_mean(), abs=1e-3)


# -- price and holdings ---------------------------------------------------------------


def test_impact_price_without_trading_is_discounted_p0():
    p = params()
    t = np.linspace(0, 10, 11)
    np.testing.assert_allclose(impact_price_mean(p, np.full(11, p.Z0), t), p.P0 * np.exp(-p.beta * t))
    np.testing.assert_allclose(impact_price_mean(params(eta=1e-300), t * 0 + 7.0, t),
                               p.P0 * np.exp(-p.beta * t))


def test_impact_price_rises_when_miners_buy():
    p = params(beta=0.0, P0=10.0, eta=0.5)
    t = np.linspace(0, 4, 9)
    np.testing.assert_allclose(impact_price_mean(p, p.Z0 - t, t), 10 + 0.5 * t)


def test_investor_holdings():
    t = np.linspace(0, 20, 41)
    p = params()
    np.testing.assert_array_equal(investor_holdings(np.zeros(41), p, t), p.Z0)
    np.testing.assert_allclose(investor_holdings(np.full(41, 0.5), p, t / 2), p.Z0 - 0.75 * t)
    q = params(K=10, Z0=50.0, m0=((4.0, 6.0, 1.0),))
    assert investor_holdings(np.full(41, 0.1), q, t)[-1] == pytest.approx(30.0)


def test_supply_exhaustion():
    t = np.linspace(0, 10, 11)
    with pytest.raises(SupplyExhaustedError) as e:
        investor_holdings(np.full(11, 2.0), params(), t)
    assert e.value.t == pytest.approx(5.0)


# -- HJB --------------------------------------------------------------------------


def test_zero_data_gives_zero_value():
    p = params(ell=0.0, h=0.0, P0=0.0)
    g = make_grid(p, 100, 100)
    Z = np.full(101, p.Z0)
    v = solve_hjb_mfg(p, Z, impact_price_mean(p, Z, g.t), g)
    assert np.all(v.values == 0.0)


def test_control_bound_shrinks_like_inverse_cost():
    peaks = []
    for rho in (10.0, 100.0, 1000.0):
        p = params(rho=rho)
        g = make_grid(p, 200, 200)
        Z = np.full(201, 1e-3)
        P = impact_price_mean(p, Z, g.t) * np.exp(p.beta * g.t)
        v = solve_hjb_mfg(p, Z, impact_price_mean(p, Z, g.t), g)
        nu = optimal_control_field(v, p, P)
        interior = nu[:, 60:140]
        peaks.append(np.abs(interior).max())
    assert peaks[0] > peaks[1] > peaks[2]
    assert peaks[2] * 1000 <= 1.05 * peaks[0] * 10


def test_value_self_convergence_away_from_boundary_layers():
    p = params()
    vals = {}
    for M in (100, 200, 400):
        g = make_grid(p, M, M)
        Z = 25.0 + 5.0 * g.t
        vals[M] = solve_hjb_mfg(p, Z, impact_price_mean(p, Z, g.t), g).values
    band = slice(30, 61)  # y in [0.3, 0.6] on the coarse grid
    e1 = np.abs(vals[100][:, band] - vals[200][::2, ::2][:, band]).max()
    e2 = np.abs(vals[200][:, 2 * band.start:2 * band.stop - 1] -
                vals[400][::2, ::2][:, 2 * band.start:2 * band.stop - 1]).max()
    assert e1 / e2 >= 1.5


# -- control field ------------------------------------------------------------------


def _flat_grid(p, M, J, values):
    t = np.linspace(0, p.T, M + 1)
    return ValueGrid(t, np.linspace(0, 1, J + 1), values, p)


def test_control_is_zero_when_marginal_value_equals_price():
    p = params()
    M, J = 20, 50
    t = np.linspace(0, p.T, M + 1)
    N = volume_at(p, t)
    P = np.full(M + 1, 3.0)
    # v_x = e^{-beta t} P  <=>  v = e^{-beta t} P y N
    values = (np.exp(-p.beta * t) * P * N)[:, None] * np.linspace(0, 1, J + 1)[None, :]
    nu = optimal_control_field(_flat_grid(p, M, J, values), p, P)
    np.testing.assert_allclose(nu, 0.0, atol=1e-12)


def test_flat_value_sells_and_cost_scales():
    p = params()
    M, J = 20, 50
    grid = _flat_grid(p, M, J, np.zeros((M + 1, J + 1)))
    P = np.full(M + 1, 2.0)
    nu = optimal_control_field(grid, p, P)
    assert np.all(nu < 0)
    t = grid.times
    np.testing.assert_allclose(nu[:, 7], -volume_rate(p, t) / (2 * p.rho) * 2.0)
    np.testing.assert_allclose(optimal_control_field(grid, params(rho=2 * p.rho), P), nu / 2)


# -- transport -------------------------------------------------------------------------


def test_no_trading_and_no_investors_keeps_shares_fixed():
    p = params()
    g = make_grid(p, 50, 200)
    m0 = initial_density(p, g.y)
    m = transport_density(p, np.zeros((51, 201)), np.zeros(51), m0, g)
    np.testing.assert_array_equal(m, np.broadcast_to(m0, m.shape))


@pytest.mark.parametrize("c", [0.02, -0.03])
def test_box_translates_with_constant_velocity(c):
    J, M, T = 400, 100, 5.0
    y = np.linspace(0, 1, J + 1)
    dy = 1.0 / J
    m0 = np.where((y >= 0.4) & (y <= 0.45), 1.0, 0.0)
    m0 /= mass(m0, dy)[0]
    vel = np.full((M, J + 1), c)
    m, escaped, _ = transport(T / M, dy, vel, m0)
    assert escaped == 0.0
    com0 = (y * m0).sum() * dy
    comT = (y * m[-1]).sum() * dy
    assert abs(comT - (com0 + c * T)) <= 2 * dy
    assert abs(mass(m[-1], dy)[0] - 1.0) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    amp=st.floats(0.0, 0.2),
    freq=st.floats(0.5, 6.0),
    shift=st.floats(-0.05, 0.05),
)
def test_transport_conserves_mass_and_positivity(amp, freq, shift):
    J, M = 200, 40
    y = np.linspace(0, 1, J + 1)
    t = np.linspace(0, 1, M)[:, None]
    vel = shift + amp * np.sin(freq * (2 * np.pi * y[None, :] + t))
    m0 = np.exp(-((y - 0.5) / 0.05) ** 2)
    m0 /= mass(m0, 1.0 / J)[0]
    m, _, _ = transport(1.0 / M, 1.0 / J, vel, m0)
    np.testing.assert_allclose(mass(m, 1.0 / J), 1.0, atol=1e-12)
    assert m.min() >= 0.0


def test_escape_is_reported():
    p = params()
    g = make_grid(p, 40, 100)
    m0 = initial_density(p, g.y)
    control = np.full((41, 101), -40.0)
    with pytest.raises(BoundaryEscapeError) as e:
        transport_density(p, control, np.full(41, p.Z0), m0, g)
    assert e.value.escaped > 1e-6


def test_transport_backends_agree():
    J, M = 150, 30
    y = np.linspace(0, 1, J + 1)
    vel = 0.1 * np.cos(3 * y)[None, :] * np.linspace(1, -1, M)[:, None]
    m0 = np.where(np.abs(y - 0.5) < 0.1, 5.0, 0.0)
    a = transport(0.05, 1.0 / J, vel, m0, "numba")
    b = transport(0.05, 1.0 / J, vel, m0, "numpy")
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=1e-14)
    assert a[2] == b[2]


# -- aggregation --------------------------------------------------------------------------


def test_aggregate_constant_control():
    p = params()
    g = make_grid(p, 5, 200)
    m = np.broadcast_to(initial_density(p, g.y), (6, 201))
    np.testing.assert_allclose(aggregate_trade(np.full((6, 201), -1.5), m, g.dy), -1.5,
                               rtol=1e-13)


def test_aggregate_odd_control_on_symmetric_density():
    y = np.linspace(0, 1, 201)
    m = np.exp(-((y - 0.5) / 0.1) ** 2)[None, :]
    nu = np.sin(7 * (y - 0.5))[None, :]
    assert abs(aggregate_trade(nu, m, 1 / 200)[0]) < 1e-12


def test_aggregate_two_boxes_is_the_average():
    J = 1000
    y = np.linspace(0, 1, J + 1)
    dy = 1.0 / J
    m = np.zeros(J + 1)
    m[197:204] = m[697:704] = 1.0
    m /= mass(m, dy)[0]
    nu = (3 * y ** 2 - 1)[None, :]
    expected = 0.5 * ((3 * 0.04 - 1) + (3 * 0.49 - 1))
    assert aggregate_trade(nu, m[None, :], dy)[0] == pytest.approx(expected, abs=5 * dy)


# -- equilibrium --------------------------------------------------------------------------


def test_zero_fixed_point():
    p = params(ell=0.0, h=0.0, P0=0.0)
    s = equilibrium_iterate(p, M=100, J=100)
    assert s.converged and s.iterations == 1
    assert np.all(s.nu_eq == 0) and np.all(s.value.values == 0)
    np.testing.assert_array_equal(s.Z_path, p.Z0)


def test_reference_equilibrium(reference_state):
    s = reference_state
    assert s.converged and s.iterations <= 200 and s.residual <= 1e-6
    assert s.defect <= 10 * 1e-6
    np.testing.assert_allclose(s.mass(), 1.0, atol=1e-8)
    assert s.density.min() >= 0
    mean0, var0 = s.share_moments(0)
    meanT, varT = s.share_moments(s.times.size - 1)
    assert varT > var0 and meanT < mean0
    p = s.params
    N = volume_at(p, s.times)
    assert np.all((s.Z_path > 0) & (s.Z_path < N))


def test_clearing_identity(reference_state):
    s = reference_state
    p = s.params
    np.testing.assert_allclose(s.Z_path, investor_holdings(s.nu_eq, p, s.times), rtol=0, atol=0)
    N = volume_at(p, s.times)
    total = p.K * np.array([s.holding_moments(n)[0] for n in range(s.times.size)]) + s.Z_path
    assert np.all(np.abs(np.diff(total) - np.diff(N)) <= 1e-3 * np.diff(N))


def test_damping_reduces_residual(reference_state):
    h = reference_state.history
    assert h[9] < h[0]


def test_restart_from_fixed_point_is_idempotent(reference_state):
    s = reference_state
    again = equilibrium_iterate(s.params, nu_init=s.nu_eq)
    assert again.iterations == 1 and again.residual <= 1e-6
    np.testing.assert_allclose(again.nu_eq, s.nu_eq, atol=1e-6)


def test_self_convergence_under_refinement(reference_state):
    fine = equilibrium_iterate(reference_state.params, M=400, J=400)
    diff = np.abs(reference_state.nu_eq - fine.nu_eq[::2]).max()
    assert diff <= 0.05 * np.abs(fine.nu_eq).max()


def test_larger_cost_means_slower_trading():
    peaks = [np.abs(equilibrium_iterate(params(rho=rho)).nu_eq).max()
             for rho in (25.0, 100.0, 250.0, 2500.0)]
    assert all(a > b for a, b in zip(peaks, peaks[1:]))


def test_non_convergence_is_reported():
    s = equilibrium_iterate(params(), max_iter=3)
    assert not s.converged and s.iterations == 3
    assert len(s.history) == 3 and s.history[0] > s.history[1] > s.history[2]


def test_backends_agree_on_equilibrium(reference_state):
    s = equilibrium_iterate(reference_state.params, backend="numpy")
    np.testing.assert_allclose(s.nu_eq, reference_state.nu_eq, rtol=1e-9, atol=1e-12)
    assert s.iterations == reference_state.iterations


def test_bad_iteration_settings():
    with pytest.raises(InvalidParameterError):
        equilibrium_iterate(params(), damping=0.0)
    with pytest.raises(InvalidParameterError):
        equilibrium_iterate(params(), tol=0.0)


def test_outputs(reference_state, tmp_path):
    summary = write_outputs(reference_state, tmp_path / "a", stride=4)
    write_outputs(reference_state, tmp_path / "b", stride=4)
    for name in ("nu_eq.csv", "density.csv", "value.csv", "convergence.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "nu_eq.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "nu_eq", "Z", "Ptilde"] and len(rows) == 202
    with open(tmp_path / "a" / "density.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "x", "m"]
    loaded = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert loaded["converged"] is True
    assert set(loaded["moments"]) == {"0", "T/2", "T"}
    assert loaded["moments"]["T"]["t"] == pytest.approx(10.0)
    assert math.isclose(summary["moments"]["0"]["mean_holding"], 25.0, rel_tol=1e-3)
