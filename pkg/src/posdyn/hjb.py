"""Continuous-time trading under a trade-rate cap, with linear utilities.

A miner holding ``X`` coins trades at rate ``nu`` with ``|nu| <= nubar``
while rewards grow holdings proportionally: ``X' = nu + (N'/N) X``.  The
objective is

    J(nu) = int_0^T [-P_beta(t) nu + e^{-beta t} ell X] dt + e^{-beta T} h X(T)

where ``P_beta(t) = e^{-beta t} E P(t)``.  With linear utilities the value
function is affine in the share and the optimal control is bang-bang: buy at
full rate while the return rate ``Psi(t)`` exceeds ``P_beta(t)``, sell
otherwise.

The HJB solver works in the share coordinate ``y = x / N(t)``, which removes
the reward drift and fixes the domain to ``[0, 1]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import integrate, optimize

from .errors import (
    GridError,
    InvalidParameterError,
    NoCrossingError,
    NumericalError,
    PreconditionError,
)
from .kernels.pde import hjb_bang_bang
from .urn import fmt

QUAD_TOL = 1e-10
ROOT_TOL = 1e-8
ODE_STEPS = 2000
SCAN_POINTS = 10_000


@dataclass(frozen=True)
class ConstantPtilde:
    """Discounted expected price held constant: ``P_beta(t) = P0``."""

    P0: float


@dataclass(frozen=True)
class GBM:
    """Geometric Brownian price; ``P_beta(t) = P0 exp((mu - beta) t)``."""

    P0: float
    mu: float
    sigma: float = 0.0


PriceModel = Union[ConstantPtilde, GBM]


@dataclass(frozen=True)
class ControlParams:
    alpha: float
    N0: float
    T: float
    beta: float
    ell: float
    h: float
    nubar: float
    x0: float
    price: PriceModel
    r: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "N0", "T"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be positive, got {v}")
        for name in ("beta", "ell", "h", "nubar", "r"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be nonnegative")
        if self.r > self.beta:
            raise InvalidParameterError("need r <= beta for bond holdings to be worthless")
        if not 0 <= self.x0 <= self.N0:
            raise InvalidParameterError("x0 must lie in [0, N0]")
        if not self.price.P0 > 0:
            raise InvalidParameterError("P0 must be positive")


# --------------------------------------------------------------------------
# model curves
# --------------------------------------------------------------------------


def volume_at(params: ControlParams, t):
    """``N(t) = (N0^(1/alpha) + t)^alpha``."""
    return (params.N0 ** (1.0 / params.alpha) + np.asarray(t, dtype=np.float64)) ** params.alpha


def volume_rate(params: ControlParams, t):
    a = params.alpha
    return a * (params.N0 ** (1.0 / a) + np.asarray(t, dtype=np.float64)) ** (a - 1.0)


def price_discounted(params: ControlParams, t):
    p = params.price
    t = np.asarray(t, dtype=np.float64)
    if isinstance(p, ConstantPtilde):
        return np.full_like(t, p.P0) if t.ndim else p.P0
    return p.P0 * np.exp((p.mu - params.beta) * t)


def price_trend(params: ControlParams) -> int:
    """+1 if ``P_beta`` increases, -1 if it decreases, 0 if constant."""
    p = params.price
    if isinstance(p, ConstantPtilde) or p.mu == params.beta:
        return 0
    return 1 if p.mu > params.beta else -1


def _quad(f, a, b):
    if a == b:
        return 0.0
    val, err, *rest = integrate.quad(f, a, b, epsabs=QUAD_TOL, epsrel=1e-12, limit=200,
                                     full_output=1)
    if len(rest) > 1 and err > 10 * QUAD_TOL * max(1.0, abs(val)):
        raise NumericalError(f"quadrature on [{a}, {b}] did not converge: {rest[1]}")
    return val


def psi(params: ControlParams, t: float) -> float:
    """Return rate of holding one coin from ``t`` on, per coin of volume."""
    p = params
    T = p.T
    NT = float(volume_at(p, T))
    tail = 0.0
    if p.ell:
        tail = _quad(lambda s: math.exp(-p.beta * s) * float(volume_at(p, s)), t, T)
    return (p.h * math.exp(-p.beta * T) * NT + p.ell * tail) / float(volume_at(p, t))


def psi_grid(params: ControlParams, times) -> np.ndarray:
    """``psi`` on a sorted time grid, integrating cell by cell from the end."""
    ts = np.asarray(times, dtype=np.float64)
    p = params
    tail = np.zeros(ts.size)
    if p.ell:
        f = lambda s: math.exp(-p.beta * s) * float(volume_at(p, s))  # noqa: E731
        pieces = [_quad(f, a, b) for a, b in zip(ts[:-1], ts[1:])]
        tail[:-1] = np.cumsum(pieces[::-1])[::-1]
        tail[:-1] += _quad(f, ts[-1], p.T)
        tail[-1] = _quad(f, ts[-1], p.T)
    NT = float(volume_at(p, p.T))
    return (p.h * math.exp(-p.beta * p.T) * NT + p.ell * tail) / volume_at(p, ts)


def check_volume_condition(params: ControlParams) -> bool:
    """True when full-rate trading cannot drive the share to 0 or 1 before T."""
    p = params
    if p.nubar == 0:
        return True
    reach = p.nubar * _quad(lambda s: 1.0 / float(volume_at(p, s)), 0.0, p.T)
    return reach <= min(p.x0 / p.N0, (p.N0 - p.x0) / p.N0)


# --------------------------------------------------------------------------
# closed-form bang-bang control
# --------------------------------------------------------------------------

SHAPES = {"sell": "a", "sell-buy": "b", "buy-sell": "c", "buy": "d"}


@dataclass(frozen=True)
class PiecewiseControl:
    """Rate ``values[i]`` on ``(breakpoints[i], breakpoints[i+1]]``.

    ``breakpoints`` starts at 0 and ends at T; the first segment also
    covers t = 0.
    """

    breakpoints: tuple
    values: tuple
    crossings: tuple = ()

    def __post_init__(self):
        b = tuple(float(x) for x in self.breakpoints)
        v = tuple(float(x) for x in self.values)
        if len(b) != len(v) + 1 or any(x >= y for x, y in zip(b, b[1:])):
            raise InvalidParameterError("breakpoints must be strictly increasing, one more than values")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    def __call__(self, t: float, x: float = 0.0) -> float:
        i = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return self.values[min(max(i, 0), len(self.values) - 1)]

    @property
    def shape(self) -> str:
        words = ["buy" if v > 0 else "sell" for v in self.values]
        return "-".join(words) if len(words) <= 2 else "alternating"

    @property
    def switch_times(self) -> tuple:
        return self.breakpoints[1:-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment_start", "segment_end", "nu"])
            for a, b, v in zip(self.breakpoints, self.breakpoints[1:], self.values):
                w.writerow([fmt(a), fmt(b), fmt(v)])


def _gap(params):
    """``Psi - P_beta``: buy where nonnegative."""
    return lambda t: psi(params, t) - float(price_discounted(params, t))


def switching_time(params: ControlParams, bracket=None, tol: float = ROOT_TOL) -> float:
    """Root of ``P_beta - Psi`` on ``bracket`` (default ``[0, T]``) by bisection."""
    a, b = bracket if bracket is not None else (0.0, params.T)
    g = _gap(params)
    ga, gb = g(a), g(b)
    if ga == 0.0:
        return float(a)
    if gb == 0.0:
        return float(b)
    if ga * gb > 0:
        raise NoCrossingError(f"P_beta - Psi keeps one sign on [{a}, {b}]")
    return float(optimize.bisect(g, a, b, xtol=tol, maxiter=200))


def monotone_gap_conditions(params: ControlParams) -> tuple[bool, bool]:
    """Large-volume sufficient conditions for ``Psi - P_beta`` to be monotone.

    The first makes it increasing, the second decreasing.  Both are strict
    inequalities (the slack may be taken arbitrarily small).
    """
    p = params
    if not isinstance(p.price, GBM) or not p.beta > p.price.mu:
        return False, False
    a, mu, beta, ell, h, T = p.alpha, p.price.mu, p.beta, p.ell, p.h, p.T
    root = p.N0 ** (1.0 / a)
    up = (a * h * math.exp(-mu * T) * (root + T) ** a / p.N0 ** (1.0 + 1.0 / a)
          + a * ell / (beta * root) + ell) / (beta - mu)
    down = (a * h * math.exp(-beta * T) / (root + T) + ell * math.exp(-mu * T)) / (beta - mu)
    P0 = p.price.P0
    return P0 > up, P0 < down


def predicted_gbm_shape(params: ControlParams):
    """Shape letter predicted for GBM prices with beta > mu, or None."""
    c1, c2 = monotone_gap_conditions(params)
    p = params
    P0 = p.price.P0
    psi0, psiT = psi(p, 0.0), psi(p, p.T)
    edge = math.exp((p.beta - p.price.mu) * p.T) * psiT if isinstance(p.price, GBM) else psiT
    if (c1 and P0 > edge) or (c2 and P0 > psi0):
        return "a"
    if c1 and psi0 <= P0 < edge:
        return "b"
    if c2 and edge <= P0 < psi0:
        return "c"
    if (c2 and P0 < edge) or (c1 and P0 < psi0):
        return "d"
    return None


def _from_signs(params, first_buy: bool, roots) -> PiecewiseControl:
    nb = params.nubar
    cuts = [t for t in roots if 0.0 < t < params.T]
    bps = [0.0, *cuts, params.T]
    vals = [nb if (first_buy ^ (i % 2 == 1)) else -nb for i in range(len(bps) - 1)]
    return PiecewiseControl(tuple(bps), tuple(vals), tuple(roots))


def _monotone_control(params, decreasing_gap: bool) -> PiecewiseControl:
    g = _gap(params)
    g0, gT = g(0.0), g(params.T)
    nb = params.nubar
    if decreasing_gap:
        if g0 <= 0.0:
            return PiecewiseControl((0.0, params.T), (-nb,))
        if gT >= 0.0:
            return PiecewiseControl((0.0, params.T), (nb,))
        return _from_signs(params, True, [switching_time(params)])
    if g0 >= 0.0:
        return PiecewiseControl((0.0, params.T), (nb,))
    if gT <= 0.0:
        return PiecewiseControl((0.0, params.T), (-nb,))
    return _from_signs(params, False, [switching_time(params)])


def scan_crossings(params: ControlParams, points: int = SCAN_POINTS):
    """Sign of ``Psi - P_beta`` on a uniform grid and the bracketed roots."""
    ts = np.linspace(0.0, params.T, points)
    gap = psi_grid(params, ts) - price_discounted(params, ts)
    sign = np.where(gap >= 0.0, 1, -1)
    roots = []
    for i in np.flatnonzero(sign[1:] != sign[:-1]):
        roots.append(switching_time(params, (ts[i], ts[i + 1])))
    return ts, sign, roots


def classify_strategy(params: ControlParams) -> PiecewiseControl:
    """Optimal bang-bang control for linear utilities.

    ``Psi`` is strictly decreasing, so with a constant or increasing
    ``P_beta`` the two curves cross at most once and the endpoint signs
    decide the shape.  For a decreasing ``P_beta`` the same holds whenever
    one of the large-volume monotonicity conditions applies; otherwise every
    crossing found on a dense grid becomes a switch.
    """
    if not check_volume_condition(params):
        raise PreconditionError("trade cap can exhaust the share before T; "
                                "the bang-bang classification needs an interior path")
    trend = price_trend(params)
    if trend >= 0:
        return _monotone_control(params, decreasing_gap=True)
    c1, c2 = monotone_gap_conditions(params)
    if c1 or c2:
        return _monotone_control(params, decreasing_gap=c2)
    _, sign, roots = scan_crossings(params)
    return _from_signs(params, sign[0] > 0, roots)


def closed_form_value(params: ControlParams) -> float:
    """``Psi(0) x0 + nubar int_0^T |Psi - P_beta| dt`` (valid under the volume condition)."""
    g = _gap(params)
    pts = [t for t in classify_strategy(params).switch_times]
    total = 0.0
    for a, b in zip([0.0, *pts], [*pts, params.T]):
        total += _quad(lambda t: abs(g(t)), a, b)
    return psi(params, 0.0) * params.x0 + params.nubar * total


# --------------------------------------------------------------------------
# state dynamics and objective
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StatePath:
    times: np.ndarray
    X: np.ndarray
    exit_time: float
    value: float = float("nan")


Control = Union[PiecewiseControl, Callable[[float, float], float]]


def _rk4_run(control: Control, params: ControlParams, steps: int = ODE_STEPS) -> StatePath:
    p = params
    if isinstance(control, PiecewiseControl):
        cuts = list(control.breakpoints)
    else:
        cuts = [0.0, p.T]
    h_target = p.T / steps

    def rhs(t, X, nu):
        return np.array([nu + volume_rate(p, t) / volume_at(p, t) * X,
                         -float(price_discounted(p, t)) * nu
                         + math.exp(-p.beta * t) * p.ell * X])

    times, xs = [0.0], [p.x0]
    state = np.array([p.x0, 0.0])
    t = 0.0
    exit_time = p.T
    done = False
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, round((b - a) / h_target))
        dt = (b - a) / n
        nu_seg = control(0.5 * (a + b), 0.0) if isinstance(control, PiecewiseControl) else None
        for i in range(n):
            t = a + i * dt
            nu = nu_seg if nu_seg is not None else float(control(t, state[0]))
            k1 = rhs(t, state[0], nu)
            k2 = rhs(t + dt / 2, state[0] + dt / 2 * k1[0], nu)
            k3 = rhs(t + dt / 2, state[0] + dt / 2 * k2[0], nu)
            k4 = rhs(t + dt, state[0] + dt * k3[0], nu)
            new = state + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t_new = a + (i + 1) * dt
            N_new = float(volume_at(p, t_new))
            if new[0] <= 0.0 or new[0] >= N_new:
                edge = 0.0 if new[0] <= 0.0 else N_new
                frac = (edge - state[0]) / (new[0] - state[0])
                exit_time = t + frac * dt
                state = state + frac * (new - state)
                state[0] = edge
                times.append(exit_time)
                xs.append(edge)
                done = True
                break
            state = new
            times.append(t_new)
            xs.append(state[0])
        if done:
            break
    value = state[1] + math.exp(-p.beta * exit_time) * p.h * state[0]
    return StatePath(np.array(times), np.array(xs), float(exit_time), float(value))


def integrate_state(control: Control, params: ControlParams, steps: int = ODE_STEPS) -> StatePath:
    """Classical RK4 for ``X' = nu + (N'/N) X``, stopped when X hits 0 or N(t)."""
    return _rk4_run(control, params, steps)


def evaluate_objective(control: Control, params: ControlParams, steps: int = ODE_STEPS) -> float:
    """Objective ``J`` along the controlled path; the running reward rides along in RK4."""
    return _rk4_run(control, params, steps).value


# --------------------------------------------------------------------------
# HJB grid solver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueGrid:
    times: np.ndarray
    y_nodes: np.ndarray
    values: np.ndarray  # (M+1, J+1), values[n, j] = v(t_n, y_j N(t_n))
    params: ControlParams = field(repr=False)

    def volumes(self) -> np.ndarray:
        return volume_at(self.params, self.times)

    def value_at(self, t_index: int, x: float) -> float:
        """Linear interpolation of ``v(t_n, x)``."""
        N = float(volume_at(self.params, self.times[t_index]))
        return float(np.interp(x / N, self.y_nodes, self.values[t_index]))

    def write_csv(self, path, stride: int = 1) -> None:
        N = self.volumes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "y", "x", "v"])
            for n in range(0, self.times.size, stride):
                for j in range(0, self.y_nodes.size, stride):
                    y = self.y_nodes[j]
                    w.writerow([fmt(self.times[n]), fmt(y), fmt(y * N[n]),
                                fmt(self.values[n, j])])


def solve_hjb(params: ControlParams, M: int = 400, J: int = 400,
              backend: str | None = None) -> ValueGrid:
    """Explicit monotone upwind scheme, marching backward from T.

    The Hamiltonian ``nubar |v_y / N - P_beta|`` is discretised as the best
    of buying (forward difference), selling (backward difference) and
    holding, which is monotone under ``dt <= dy N(0) / nubar``.
    """
    p = params
    if M < 1 or J < 2:
        raise InvalidParameterError("need M >= 1 and J >= 2")
    dt, dy = p.T / M, 1.0 / J
    if p.nubar > 0:
        limit = dy * p.N0 / p.nubar
        if dt > limit * (1 + 1e-12):
            raise GridError(f"time step {dt:.6g} violates the CFL bound", limit)
    times = np.linspace(0.0, p.T, M + 1)
    y = np.linspace(0.0, 1.0, J + 1)
    Nt = volume_at(p, times)
    disc = np.exp(-p.beta * times)
    Pt = np.asarray(price_discounted(p, times), dtype=np.float64)
    run = disc * p.ell * Nt
    bc_lo = np.zeros(M + 1)  # h(0) = 0 for linear h
    bc_hi = disc * p.h * Nt
    terminal = disc[-1] * p.h * y * Nt[-1]
    values = hjb_bang_bang(dt, dy, Nt, Pt, run, p.nubar, bc_lo, bc_hi, y, terminal, backend)
    if not np.all(np.isfinite(values)):
        raise NumericalError("non-finite values in the HJB solve")
    return ValueGrid(times, y, values, p)


def extract_control(grid: ValueGrid) -> np.ndarray:
    """``nubar * sign(v_x - P_beta)`` on every node, ties resolved to buying.

    Centered differences in the interior, one-sided at the two ends.
    """
    p = grid.params
    slope = np.gradient(grid.values, grid.y_nodes, axis=1) / grid.volumes()[:, None]
    Pt = np.asarray(price_discounted(p, grid.times), dtype=np.float64)
    return np.where(slope - Pt[:, None] >= 0.0, p.nubar, -p.nubar)


def control_switch_times(grid: ValueGrid, path: StatePath | None = None) -> list[float]:
    """Times where the extracted control flips along the optimal state path.

    Each switch is reported as the midpoint of the two bracketing time nodes.
    """
    p = grid.params
    nu = extract_control(grid)
    if path is None:
        path = integrate_state(classify_strategy(p), p)
    X = np.interp(grid.times, path.times, path.X)
    y = X / grid.volumes()
    j = np.clip(np.rint(y * (grid.y_nodes.size - 1)).astype(int), 1, grid.y_nodes.size - 2)
    along = nu[np.arange(grid.times.size), j]
    flips = np.flatnonzero(along[1:] != along[:-1])
    return [0.5 * (grid.times[i] + grid.times[i + 1]) for i in flips]


@dataclass(frozen=True)
class HjbComparison:
    v0: float
    oracle_value: float
    rel_err: float
    t0: list

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"v0": float(fmt(self.v0)), "oracle_value": float(fmt(self.oracle_value)),
                       "rel_err": float(fmt(self.rel_err)),
                       "t0": [float(fmt(t)) for t in self.t0]}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def compare_with_oracle(params: ControlParams, M: int = 400, J: int = 400,
                        backend: str | None = None):
    """Grid value at ``x0`` versus the objective of the classified control."""
    grid = solve_hjb(params, M, J, backend)
    control = classify_strategy(params)
    oracle = evaluate_objective(control, params)
    v0 = grid.value_at(0, params.x0)
    cmp = HjbComparison(v0, oracle, abs(v0 - oracle) / abs(oracle), list(control.switch_times))
    return cmp, grid, control
