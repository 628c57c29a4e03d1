"""Mean-field equilibrium of miners trading against price-sensitive investors.

``K`` interchangeable miners trade at rate ``nu`` with quadratic cost
``rho nu^2 / N'``.  Investors absorb the net flow, so their holdings are
``Z(t) = Z0 - K int_0^t nu_eq`` and the expected price carries a linear
impact ``P(t) = P0 - eta (Z(t) - Z0)``.  Given ``Z``, a miner solves

    v_t + e^{-beta t} ell x + x N'/(N - Z) v_x + e^{beta t} N'/(4 rho) (v_x - P_beta)^2 = 0

and the miner density is carried by ``x' = nu_* + x N'/(N - Z)``.  The
equilibrium rate is the density-weighted mean of the optimal control; it is
found by damped Picard iteration.

Both PDEs are solved in the share coordinate ``y = x / N(t)``.  The reward
drift does not cancel completely there (it uses ``N - Z``), leaving the
advection ``y (N'/N) Z/(N - Z)`` which vanishes when ``Z = 0``.

``sigma`` is carried for completeness only: everything here depends on the
price through its mean.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import (
    BoundaryEscapeError,
    GridError,
    InvalidDistributionError,
    InvalidParameterError,
    NumericalError,
    SupplyExhaustedError,
)
from .hjb import ValueGrid, volume_at, volume_rate
from .kernels.pde import hjb_quadratic, transport
from .urn import fmt

ESCAPE_TOL = 1e-6
CLIP_TOL = 1e-10
MASS_TOL = 1e-8
MAX_SUBSTEPS = 2000

Box = tuple[float, float, float]


@dataclass(frozen=True)
class MfgParams:
    K: int
    alpha: float
    N0: float
    T: float
    Z0: float
    eta: float
    rho: float
    P0: float
    beta: float
    ell: float
    h: float
    m0: tuple[Box, ...] = ((20.0, 30.0, 1.0),)
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "m0", tuple(tuple(float(v) for v in b) for b in self.m0))
        if int(self.K) != self.K or self.K < 2:
            raise InvalidParameterError("K must be an integer >= 2")
        for name in ("alpha", "N0", "T", "eta", "rho"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be positive and finite, got {v}")
        for name in ("P0", "beta", "ell", "h", "sigma"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidParameterError(f"{name} must be finite")
        if self.beta < 0 or self.sigma < 0:
            raise InvalidParameterError("beta and sigma must be >= 0")
        if not 0 <= self.Z0 < self.N0:
            raise InvalidParameterError("Z0 must lie in [0, N0)")
        if not self.m0:
            raise InvalidDistributionError("m0 needs at least one box")
        for lo, hi, w in self.m0:
            if not (0 < lo < hi < self.N0) or w <= 0:
                raise InvalidDistributionError(f"box ({lo}, {hi}, {w}) must satisfy 0 < lo < hi < N0, w > 0")
        if abs(self.K * self.initial_mean() + self.Z0 - self.N0) > 1e-8:
            raise InvalidParameterError(
                f"K * mean(m0) + Z0 = {self.K * self.initial_mean() + self.Z0} must equal N0")

    def initial_mean(self) -> float:
        """Mean holding under ``m0`` (boxes are weighted by ``w``, uniform inside)."""
        total = sum(w for _, _, w in self.m0)
        return sum(w * 0.5 * (lo + hi) for lo, hi, w in self.m0) / total


@dataclass
class Grid:
    """Time nodes and share nodes plus per-node volume data."""

    t: np.ndarray
    y: np.ndarray
    N: np.ndarray
    dN: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.y.size, self.dy)
        w[0] = w[-1] = 0.5 * self.dy
        return w


def make_grid(params: MfgParams, M: int, J: int) -> Grid:
    if M < 1 or J < 2:
        raise InvalidParameterError("need M >= 1 and J >= 2")
    t = np.linspace(0.0, params.T, M + 1)
    return Grid(t, np.linspace(0.0, 1.0, J + 1), volume_at(params, t), volume_rate(params, t))


def initial_density(params: MfgParams, y: np.ndarray) -> np.ndarray:
    """Nodal density in ``y`` whose control-volume averages match ``m0`` exactly."""
    dy = y[1] - y[0]
    lo_cv = np.maximum(y - 0.5 * dy, 0.0)
    hi_cv = np.minimum(y + 0.5 * dy, 1.0)
    width = hi_cv - lo_cv
    total = sum(w for _, _, w in params.m0)
    m = np.zeros_like(y)
    for lo, hi, w in params.m0:
        a, b = lo / params.N0, hi / params.N0
        overlap = np.clip(np.minimum(hi_cv, b) - np.maximum(lo_cv, a), 0.0, None)
        m += (w / total) * overlap / (b - a)
    return m / width


def mass(density: np.ndarray, dy: float) -> np.ndarray:
    """Mass of each time row of a nodal density (half weights at the ends)."""
    d = np.atleast_2d(density)
    return dy * (d.sum(axis=1) - 0.5 * (d[:, 0] + d[:, -1]))


# -- pipeline pieces ------------------------------------------------------------


def impact_price_mean(params: MfgParams, Z_path, t) -> np.ndarray:
    """Discounted expected price ``e^{-beta t} [P0 - eta (Z - Z0)]``."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-params.beta * t) * (params.P0 - params.eta * (np.asarray(Z_path) - params.Z0))


def investor_holdings(nu_eq, params: MfgParams, t, N=None) -> np.ndarray:
    """``Z(t) = Z0 - K int_0^t nu_eq`` by the cumulative trapezoid rule."""
    t = np.asarray(t, dtype=np.float64)
    Z = params.Z0 - params.K * integrate.cumulative_trapezoid(nu_eq, t, initial=0.0)
    N = volume_at(params, t) if N is None else N
    bad = np.flatnonzero((Z <= 0) | (Z >= N))
    if bad.size:
        i = int(bad[0])
        raise SupplyExhaustedError(float(t[i]), float(Z[i]), float(N[i]))
    return Z


def solve_hjb_mfg(params: MfgParams, Z_path, Ptilde, grid: Grid,
                  backend: str | None = None) -> ValueGrid:
    """Backward sweep for the rescaled value ``v(t, y N(t))``.

    ``Ptilde`` is the discounted expected price on the time grid.  The time
    step is split into substeps that keep the explicit update monotone; a
    grid that would need more than ``MAX_SUBSTEPS`` per step is rejected
    with the step that would have worked.
    """
    p, g = params, grid
    Z = np.asarray(Z_path, dtype=np.float64)
    disc = np.exp(-p.beta * g.t)
    run = disc * p.ell * g.N
    adv = g.dN / g.N * Z / (g.N - Z)
    coef = g.dN / (4.0 * p.rho * disc)
    bc_hi = disc * p.h * g.N
    terminal = bc_hi[-1] * g.y
    M = g.t.size - 1
    values, substeps = hjb_quadratic(g.dt, g.dy, g.N, np.asarray(Ptilde, dtype=np.float64), run,
                                     adv, coef, np.zeros_like(g.t), bc_hi, g.y, terminal, backend,
                                     limit=MAX_SUBSTEPS * M)
    if substeps == -2:
        raise GridError(f"more than {MAX_SUBSTEPS} stable substeps per time step needed",
                        g.dt / MAX_SUBSTEPS)
    if substeps < 0 or not np.all(np.isfinite(values)):
        raise NumericalError("non-finite value function")
    return ValueGrid(g.t, g.y, values, p)


def value_gradient(grid: ValueGrid) -> np.ndarray:
    """``d v / d x`` by centered differences (one-sided at the ends)."""
    N = volume_at(grid.params, grid.times)
    return np.gradient(grid.values, grid.y_nodes, axis=1) / N[:, None]


def optimal_control_field(grid: ValueGrid, params: MfgParams, Ptilde_undiscounted) -> np.ndarray:
    """``nu_*(t, y) = N'/(2 rho) (e^{beta t} v_x - P(t))``."""
    t = grid.times
    dN = volume_rate(params, t)
    P = np.asarray(Ptilde_undiscounted, dtype=np.float64)
    return (dN / (2.0 * params.rho))[:, None] * (
        np.exp(params.beta * t)[:, None] * value_gradient(grid) - P[:, None])


def share_velocity(control, params: MfgParams, Z_path, grid: Grid) -> np.ndarray:
    """Velocity of ``y = x / N``: ``nu / N + y (N'/N) Z / (N - Z)``."""
    Z = np.asarray(Z_path, dtype=np.float64)
    adv = grid.dN / grid.N * Z / (grid.N - Z)
    return np.asarray(control) / grid.N[:, None] + adv[:, None] * grid.y[None, :]


def transport_density(params: MfgParams, control, Z_path, m0, grid: Grid,
                      backend: str | None = None) -> np.ndarray:
    """Conservative upwind transport of the nodal share density ``m0``.

    Each step uses the mean of the velocities at its two ends, matching the
    trapezoid rule that turns the trade rate into investor holdings.
    """
    vel = share_velocity(control, params, Z_path, grid)
    m, escaped, _ = transport(grid.dt, grid.dy, 0.5 * (vel[:-1] + vel[1:]), m0, backend)
    if escaped > ESCAPE_TOL:
        raise BoundaryEscapeError(escaped)
    neg = m < 0
    if neg.any():
        deficit = float(-(m[neg]).sum() * grid.dy)
        if deficit > CLIP_TOL:
            raise NumericalError(f"negative density deficit {deficit:.3g}")
        m = np.where(neg, 0.0, m)
        m /= mass(m, grid.dy)[:, None]
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite density")
    return m


def aggregate_trade(control, density, dy: float) -> np.ndarray:
    """``int nu_* m dx`` per time node (trapezoid on the share grid)."""
    f = np.asarray(control) * np.asarray(density)
    return dy * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))


# -- equilibrium -----------------------------------------------------------------


@dataclass
class MeanFieldState:
    times: np.ndarray
    nu_eq: np.ndarray
    Z_path: np.ndarray
    Ptilde: np.ndarray  # undiscounted expected price
    density: np.ndarray  # (M+1, J+1) share density
    value: ValueGrid
    control: np.ndarray
    residual: float
    iterations: int
    converged: bool
    history: list[float]
    defect: float
    params: MfgParams = field(repr=False)

    @property
    def y(self) -> np.ndarray:
        return self.value.y_nodes

    def mass(self) -> np.ndarray:
        return mass(self.density, self.y[1] - self.y[0])

    def share_moments(self, n: int) -> tuple[float, float]:
        """Mean and variance of the share ``y`` under the density at time node ``n``."""
        dy = self.y[1] - self.y[0]
        m = self.density[n]
        mu = aggregate_trade(self.y[None, :], m[None, :], dy)[0]
        var = aggregate_trade(((self.y - mu) ** 2)[None, :], m[None, :], dy)[0]
        return float(mu), float(var)

    def holding_moments(self, n: int) -> tuple[float, float]:
        """Mean and variance of coin holdings ``x`` at time node ``n``."""
        N = float(volume_at(self.params, self.times[n]))
        mu, var = self.share_moments(n)
        return mu * N, var * N * N


def _run_once(params, nu, grid, m0, backend):
    Z = investor_holdings(nu, params, grid.t, grid.N)
    P = params.P0 - params.eta * (Z - params.Z0)
    vg = solve_hjb_mfg(params, Z, np.exp(-params.beta * grid.t) * P, grid, backend)
    control = optimal_control_field(vg, params, P)
    m = transport_density(params, control, Z, m0, grid, backend)
    return Z, P, vg, control, m


def fixed_point_defect(params: MfgParams, nu, value: ValueGrid, density) -> float:
    """``sup_t |nu - N'/(2 rho) [e^{beta t} int v_x m dx - P0 - eta K int_0^t nu]|``."""
    t = value.times
    dy = value.y_nodes[1] - value.y_nodes[0]
    mean_grad = aggregate_trade(value_gradient(value), density, dy)
    impact = params.eta * params.K * integrate.cumulative_trapezoid(nu, t, initial=0.0)
    rhs = volume_rate(params, t) / (2.0 * params.rho) * (
        np.exp(params.beta * t) * mean_grad - params.P0 - impact)
    return float(np.max(np.abs(nu - rhs)))


def equilibrium_iterate(params: MfgParams, damping: float = 0.5, tol: float = 1e-6,
                        max_iter: int = 200, M: int = 200, J: int = 200,
                        backend: str | None = None, nu_init=None) -> MeanFieldState:
    """Damped Picard iteration ``nu <- (1 - damping) nu + damping nu_hat``.

    Stops when the sup-norm update falls to ``tol``.  Reaching ``max_iter``
    is not an error: the state is returned with ``converged=False`` and the
    residual history.
    """
    if not 0 < damping <= 1:
        raise InvalidParameterError("damping must lie in (0, 1]")
    if tol <= 0 or max_iter < 1:
        raise InvalidParameterError("tol must be > 0 and max_iter >= 1")
    grid = make_grid(params, M, J)
    m0 = initial_density(params, grid.y)
    nu = np.zeros(M + 1) if nu_init is None else np.array(nu_init, dtype=np.float64)
    if nu.shape != (M + 1,):
        raise InvalidParameterError("nu_init must have M+1 entries")
    history: list[float] = []
    converged = False
    for _ in range(max_iter):
        *_, control, m = _run_once(params, nu, grid, m0, backend)
        nu_hat = aggregate_trade(control, m, grid.dy)
        new = (1.0 - damping) * nu + damping * nu_hat
        res = float(np.max(np.abs(new - nu)))
        history.append(res)
        nu = new
        if not math.isfinite(res):
            raise NumericalError("fixed-point iteration produced a non-finite rate")
        if res <= tol:
            converged = True
            break
    Z, P, vg, control, m = _run_once(params, nu, grid, m0, backend)
    return MeanFieldState(
        times=grid.t, nu_eq=nu, Z_path=Z, Ptilde=P, density=m, value=vg, control=control,
        residual=history[-1], iterations=len(history), converged=converged, history=history,
        defect=fixed_point_defect(params, nu, vg, m), params=params,
    )


# -- output -----------------------------------------------------------------------


def write_outputs(state: MeanFieldState, out_dir, stride: int = 1) -> dict:
    """Write the equilibrium bundle; returns the summary dict."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = state.times
    N = volume_at(state.params, t)
    with open(out / "nu_eq.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "nu_eq", "Z", "Ptilde"])
        for n in range(t.size):
            w.writerow([fmt(t[n]), fmt(state.nu_eq[n]), fmt(state.Z_path[n]), fmt(state.Ptilde[n])])
    for name, arr, scale in (("density.csv", state.density, 1.0 / N),
                             ("value.csv", state.value.values, np.ones_like(N))):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "m" if name == "density.csv" else "v"])
            for n in range(0, t.size, stride):
                for j in range(0, state.y.size, stride):
                    w.writerow([fmt(t[n]), fmt(state.y[j] * N[n]), fmt(arr[n, j] * scale[n])])
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "residual"])
        for i, r in enumerate(state.history, 1):
            w.writerow([i, fmt(r)])
    M = t.size - 1
    moments = {}
    for label, n in (("0", 0), ("T/2", M // 2), ("T", M)):
        mean_y, var_y = state.share_moments(n)
        mean_x, var_x = state.holding_moments(n)
        moments[label] = {"t": float(t[n]), "mean_share": mean_y, "var_share": var_y,
                          "mean_holding": mean_x, "var_holding": var_x}
    summary = {
        "converged": state.converged,
        "iterations": state.iterations,
        "residual": state.residual,
        "fixed_point_defect": state.defect,
        "mass_error": float(np.max(np.abs(state.mass() - 1.0))),
        "moments": moments,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
