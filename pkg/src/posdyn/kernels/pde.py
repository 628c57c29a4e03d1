"""Explicit sweeps for the rescaled HJB equations and the density transport.

All grids are uniform in the share coordinate ``y in [0, 1]``.  Time-step
data (volumes, discounted prices, coefficients) are precomputed per time node
by the caller, so kernels only do arithmetic.
"""

from __future__ import annotations

import numpy as np

from .._accel import njit, resolve_backend

# --------------------------------------------------------------------------
# bang-bang HJB:  dv/dt + run[n] y + nubar |v_y / N - P| = 0,  backward in time
# --------------------------------------------------------------------------


@njit
def _hjb_bang_nb(dt, dy, Nt, Pt, run, nubar, bc_lo, bc_hi, y, out):
    M = out.shape[0] - 1
    J = out.shape[1] - 1
    for n in range(M - 1, -1, -1):
        N = Nt[n + 1]
        P = Pt[n + 1]
        for j in range(1, J):
            vj = out[n + 1, j]
            qp = (out[n + 1, j + 1] - vj) / (dy * N) - P
            qm = (vj - out[n + 1, j - 1]) / (dy * N) - P
            H = 0.0
            if qp > H:
                H = qp
            if -qm > H:
                H = -qm
            out[n, j] = vj + dt * (run[n + 1] * y[j] + nubar * H)
        out[n, 0] = bc_lo[n]
        out[n, J] = bc_hi[n]


def _hjb_bang_np(dt, dy, Nt, Pt, run, nubar, bc_lo, bc_hi, y, out):
    M = out.shape[0] - 1
    yi = y[1:-1]
    for n in range(M - 1, -1, -1):
        v = out[n + 1]
        N = Nt[n + 1]
        P = Pt[n + 1]
        qp = (v[2:] - v[1:-1]) / (dy * N) - P
        qm = (v[1:-1] - v[:-2]) / (dy * N) - P
        H = np.maximum(np.maximum(qp, 0.0), -qm)
        out[n, 1:-1] = v[1:-1] + dt * (run[n + 1] * yi + nubar * H)
        out[n, 0] = bc_lo[n]
        out[n, -1] = bc_hi[n]


def hjb_bang_bang(dt, dy, Nt, Pt, run, nubar, bc_lo, bc_hi, y, terminal, backend=None):
    """Monotone upwind sweep; returns the ``(M+1, J+1)`` value array."""
    M = Nt.shape[0] - 1
    out = np.empty((M + 1, y.shape[0]))
    out[M] = terminal
    fn = _hjb_bang_nb if resolve_backend(backend) == "numba" else _hjb_bang_np
    fn(float(dt), float(dy), Nt, Pt, run, float(nubar), bc_lo, bc_hi, y, out)
    return out


# --------------------------------------------------------------------------
# quadratic-cost HJB:
#   dv/dt + run[n] y + adv[n] y v_y + c[n] (v_y / N - P)^2 = 0
# Engquist-Osher split of the quadratic term, advection (adv >= 0) upwinded
# with the forward difference.  Coefficients are frozen at t_{n+1} over each
# step, which is split into substeps keeping every node update monotone
# (a value jump at a Dirichlet end makes the admissible step ~ dy^2 locally).
# Returns the substep count, or -1 if a rate turned non-finite.
# --------------------------------------------------------------------------

MONOTONE = 0.9


@njit
def _quad_rates(v, dy, N, P, a, c, y, dp, sp, sm):
    J = v.shape[0] - 1
    worst = 0.0
    for j in range(1, J):
        dp[j] = (v[j + 1] - v[j]) / dy
        dm = (v[j] - v[j - 1]) / dy
        qp = dp[j] / N - P
        qm = dm / N - P
        sp[j] = qp if qp > 0.0 else 0.0
        sm[j] = qm if qm < 0.0 else 0.0
        rate = a * y[j] / dy + 2.0 * c * (sp[j] - sm[j]) / (N * dy)
        if not rate < 1e300:
            return -1.0
        if rate > worst:
            worst = rate
    return worst


@njit
def _hjb_quad_nb(dt, dy, Nt, Pt, run, adv, coef, bc_lo, bc_hi, y, out, limit):
    M = out.shape[0] - 1
    J = out.shape[1] - 1
    v = out[M].copy()
    dp = np.zeros(J + 1)
    sp = np.zeros(J + 1)
    sm = np.zeros(J + 1)
    substeps = 0
    for n in range(M - 1, -1, -1):
        N = Nt[n + 1]
        P = Pt[n + 1]
        a = adv[n + 1]
        c = coef[n + 1]
        r = run[n + 1]
        left = dt
        while left > 0.0:
            worst = _quad_rates(v, dy, N, P, a, c, y, dp, sp, sm)
            if worst < 0.0:
                return -1
            if substeps >= limit:
                return -2
            h = left
            if worst * h > MONOTONE:
                h = MONOTONE / worst
            for j in range(1, J):
                v[j] += h * (r * y[j] + a * y[j] * dp[j] + c * (sp[j] * sp[j] + sm[j] * sm[j]))
            left -= h
            substeps += 1
        v[0] = bc_lo[n]
        v[J] = bc_hi[n]
        for j in range(J + 1):
            out[n, j] = v[j]
    return substeps


def _hjb_quad_np(dt, dy, Nt, Pt, run, adv, coef, bc_lo, bc_hi, y, out, limit):
    M = out.shape[0] - 1
    yi = y[1:-1]
    v = out[M].copy()
    substeps = 0
    for n in range(M - 1, -1, -1):
        N = Nt[n + 1]
        a = adv[n + 1]
        c = coef[n + 1]
        left = dt
        while left > 0.0:
            dp = (v[2:] - v[1:-1]) / dy
            dm = (v[1:-1] - v[:-2]) / dy
            sp = np.maximum(dp / N - Pt[n + 1], 0.0)
            sm = np.minimum(dm / N - Pt[n + 1], 0.0)
            rate = a * yi / dy + 2.0 * c * (sp - sm) / (N * dy)
            worst = float(rate.max())
            if not worst < 1e300:
                return -1
            if substeps >= limit:
                return -2
            h = left
            if worst * h > MONOTONE:
                h = MONOTONE / worst
            v[1:-1] += h * (run[n + 1] * yi + a * yi * dp + c * (sp * sp + sm * sm))
            left -= h
            substeps += 1
        v[0] = bc_lo[n]
        v[-1] = bc_hi[n]
        out[n] = v
    return substeps


def hjb_quadratic(dt, dy, Nt, Pt, run, adv, coef, bc_lo, bc_hi, y, terminal, backend=None,
                  limit=10**7):
    """Backward sweep; returns ``(values, substeps)``.

    ``substeps`` is -1 if a rate turned non-finite and -2 once ``limit``
    substeps were used without finishing.
    """
    M = Nt.shape[0] - 1
    out = np.empty((M + 1, y.shape[0]))
    out[M] = terminal
    fn = _hjb_quad_nb if resolve_backend(backend) == "numba" else _hjb_quad_np
    substeps = fn(float(dt), float(dy), Nt, Pt, run, adv, coef, bc_lo, bc_hi, y, out, int(limit))
    return out, int(substeps)


# --------------------------------------------------------------------------
# conservative transport of a nodal density on [0, 1]
#
# Node j owns the control volume of width w_j (dy inside, dy/2 at the ends).
# Face velocities are node averages; the upwind face value is reconstructed
# with a minmod-limited slope (zero in the two end cells), so face values stay
# within [m_j / 2, 3 m_j / 2] and the update is positive for Courant numbers
# up to 2/3.  The two outer faces carry no flux; outflow the boundary would
# have carried is tallied as escaped mass instead.  Each time step is split
# into substeps with Courant number <= COURANT on every cell that holds or
# borders mass.
# --------------------------------------------------------------------------

COURANT = 0.6


@njit
def _minmod(a, b):
    if a * b <= 0.0:
        return 0.0
    if abs(a) < abs(b):
        return a
    return b


@njit
def _transport_nb(dt, dy, vel, m0, out):
    M = vel.shape[0]
    J = vel.shape[1] - 1
    w = np.full(J + 1, dy)
    w[0] = 0.5 * dy
    w[J] = 0.5 * dy
    m = m0.copy()
    for j in range(J + 1):
        out[0, j] = m[j]
    uf = np.empty(J)
    flux = np.empty(J)
    slope = np.zeros(J + 1)
    escaped = 0.0
    substeps = 0
    for n in range(M):
        for j in range(J):
            uf[j] = 0.5 * (vel[n, j] + vel[n, j + 1])
        left = dt
        while left > 0.0:
            cmax = 0.0
            for j in range(J + 1):
                active = m[j] > 0.0 or (j > 0 and m[j - 1] > 0.0) or (j < J and m[j + 1] > 0.0)
                if not active:
                    continue
                out_rate = 0.0
                if j < J and uf[j] > 0.0:
                    out_rate += uf[j]
                if j > 0 and uf[j - 1] < 0.0:
                    out_rate -= uf[j - 1]
                if out_rate / w[j] > cmax:
                    cmax = out_rate / w[j]
            h = left
            if cmax * h > COURANT:
                h = COURANT / cmax
            for j in range(1, J):
                slope[j] = _minmod(m[j + 1] - m[j], m[j] - m[j - 1])
            for j in range(J):
                if uf[j] > 0.0:
                    flux[j] = uf[j] * (m[j] + 0.5 * slope[j])
                else:
                    flux[j] = uf[j] * (m[j + 1] - 0.5 * slope[j + 1])
            if vel[n, 0] < 0.0:
                escaped -= h * vel[n, 0] * m[0]
            if vel[n, J] > 0.0:
                escaped += h * vel[n, J] * m[J]
            m[0] -= h * flux[0] / w[0]
            for j in range(1, J):
                m[j] -= h * (flux[j] - flux[j - 1]) / w[j]
            m[J] += h * flux[J - 1] / w[J]
            left -= h
            substeps += 1
        for j in range(J + 1):
            out[n + 1, j] = m[j]
    return escaped, substeps


def _transport_np(dt, dy, vel, m0, out):
    M = vel.shape[0]
    J = vel.shape[1] - 1
    w = np.full(J + 1, dy)
    w[0] = w[J] = 0.5 * dy
    m = m0.copy()
    out[0] = m
    escaped = 0.0
    substeps = 0
    slope = np.zeros(J + 1)
    for n in range(M):
        uf = 0.5 * (vel[n, :-1] + vel[n, 1:])
        up = np.maximum(uf, 0.0)
        un = np.minimum(uf, 0.0)
        rate = np.zeros(J + 1)
        rate[:-1] += up
        rate[1:] -= un
        left = dt
        while left > 0.0:
            has = m > 0.0
            active = has.copy()
            active[1:] |= has[:-1]
            active[:-1] |= has[1:]
            cmax = float((rate[active] / w[active]).max()) if active.any() else 0.0
            h = left
            if cmax * h > COURANT:
                h = COURANT / cmax
            a = m[2:] - m[1:-1]
            b = m[1:-1] - m[:-2]
            slope[1:-1] = np.where(a * b <= 0.0, 0.0, np.where(np.abs(a) < np.abs(b), a, b))
            flux = up * (m[:-1] + 0.5 * slope[:-1]) + un * (m[1:] - 0.5 * slope[1:])
            if vel[n, 0] < 0.0:
                escaped -= h * vel[n, 0] * m[0]
            if vel[n, J] > 0.0:
                escaped += h * vel[n, J] * m[J]
            div = np.empty(J + 1)
            div[0] = flux[0]
            div[1:-1] = flux[1:] - flux[:-1]
            div[-1] = -flux[-1]
            m = m - h * div / w
            left -= h
            substeps += 1
        out[n + 1] = m
    return escaped, substeps


def transport(dt, dy, vel, m0, backend=None):
    """Push nodal density ``m0`` through ``M`` steps; ``vel[n, j]`` is held over step n.

    Returns ``(density (M+1, J+1), escaped_mass, substeps)``.
    """
    M = vel.shape[0]
    out = np.empty((M + 1, vel.shape[1]))
    fn = _transport_nb if resolve_backend(backend) == "numba" else _transport_np
    escaped, substeps = fn(float(dt), float(dy), np.ascontiguousarray(vel),
                           np.ascontiguousarray(m0, dtype=np.float64), out)
    return out, float(escaped), int(substeps)
