"""Hot loops for the urn ensemble and the gamma sampler.

Each kernel has a compiled scalar version and a numpy version vectorised over
runs/samples.  Both consume the same counter-based draws, so for schedules
without transcendental arithmetic the two paths agree exactly.
"""

from __future__ import annotations

import numpy as np

from .. import rng
from .._accel import njit, resolve_backend
from . import _rng_nb as rnb

# --------------------------------------------------------------------------
# urn ensemble
# --------------------------------------------------------------------------


@njit
def _urn_ensemble_nb(coins0, rewards, volumes, seed, first_run, runs, probe,
                     record_steps, final_out, record_out):
    K = coins0.shape[0]
    T = rewards.shape[0]
    n_rec = record_steps.shape[0]
    coins = np.empty(K)
    for r in range(runs):
        key = rnb.key_for(seed, first_run + r)
        for j in range(K):
            coins[j] = coins0[j]
        rec = 0
        while rec < n_rec and record_steps[rec] == 0:
            record_out[r, rec] = coins[probe] / volumes[0]
            rec += 1
        for t in range(1, T + 1):
            vol = volumes[t - 1]
            u = rnb.uniform(key, t)
            acc = 0.0
            k = -1
            for j in range(K):
                acc += coins[j] / vol
                if u < acc:
                    k = j
                    break
            if k < 0:
                # u landed above a cumulative sum that rounded below 1
                for j in range(K - 1, -1, -1):
                    if coins[j] > 0.0:
                        k = j
                        break
            coins[k] += rewards[t - 1]
            while rec < n_rec and record_steps[rec] == t:
                record_out[r, rec] = coins[probe] / volumes[t]
                rec += 1
        for j in range(K):
            final_out[r, j] = coins[j]


def _urn_ensemble_np(coins0, rewards, volumes, seed, first_run, runs, probe,
                     record_steps, final_out, record_out):
    K = coins0.shape[0]
    T = rewards.shape[0]
    keys = rng.stream_keys(int(seed), np.arange(first_run, first_run + runs))
    coins = np.tile(coins0, (runs, 1))
    rows = np.arange(runs)
    rec_at = {}
    for i, s in enumerate(record_steps):
        rec_at.setdefault(int(s), []).append(i)
    for i in rec_at.get(0, ()):
        record_out[:, i] = coins[:, probe] / volumes[0]
    for t in range(1, T + 1):
        u = rng.uniforms(keys, t)
        cdf = np.cumsum(coins / volumes[t - 1], axis=1)
        k = (u[:, None] >= cdf).sum(axis=1)
        over = k == K
        if over.any():
            # u landed above a cumulative sum that rounded below 1
            pos = coins[over] > 0.0
            k[over] = K - 1 - np.argmax(pos[:, ::-1], axis=1)
        coins[rows, k] += rewards[t - 1]
        for i in rec_at.get(t, ()):
            record_out[:, i] = coins[:, probe] / volumes[t]
    final_out[:, :] = coins


def urn_ensemble(coins0, rewards, volumes, seed, runs, *, first_run=0, probe=0,
                 record_steps=(), backend=None):
    """Run ``runs`` independent urn trajectories and return their final coins.

    ``rewards[t-1]`` is R_t and ``volumes[t]`` is N_t (length T+1).  Run ``r``
    uses stream index ``first_run + r``.  When ``record_steps`` is given the
    probe's share at those steps is returned as well.
    """
    backend = resolve_backend(backend)
    coins0 = np.ascontiguousarray(coins0, dtype=np.float64)
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    volumes = np.ascontiguousarray(volumes, dtype=np.float64)
    rec = np.ascontiguousarray(sorted(int(s) for s in record_steps), dtype=np.int64)
    final = np.empty((runs, coins0.shape[0]))
    recorded = np.empty((runs, rec.shape[0]))
    fn = _urn_ensemble_nb if backend == "numba" else _urn_ensemble_np
    fn(coins0, rewards, volumes, np.uint64(int(seed) & rng.MASK64), int(first_run),
       int(runs), int(probe), rec, final, recorded)
    return final, recorded


# --------------------------------------------------------------------------
# gamma variates (Marsaglia-Tsang, shape < 1 boosted by U^(1/a))
# --------------------------------------------------------------------------
#
# Draw layout per stream: if shape < 1, draw 1 is the boost uniform.  Each
# rejection attempt then uses three draws: two for a Box-Muller normal and one
# acceptance uniform.


@njit
def _gamma_nb(seed, first, shapes, out):
    n = shapes.shape[0]
    for i in range(n):
        key = rnb.key_for(seed, first + i)
        a = shapes[i]
        c = 0
        boost = 1.0
        if a < 1.0:
            c += 1
            boost = rnb.uniform_open(key, c) ** (1.0 / a)
            a = a + 1.0
        d = a - 1.0 / 3.0
        cc = 1.0 / np.sqrt(9.0 * d)
        while True:
            u1 = rnb.uniform_open(key, c + 1)
            u2 = rnb.uniform(key, c + 2)
            u3 = rnb.uniform_open(key, c + 3)
            c += 3
            x = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
            v = 1.0 + cc * x
            if v <= 0.0:
                continue
            v = v * v * v
            if np.log(u3) < 0.5 * x * x + d - d * v + d * np.log(v):
                out[i] = d * v * boost
                break


def _gamma_np(seed, first, shapes, out):
    n = shapes.shape[0]
    keys = rng.stream_keys(int(seed), np.arange(first, first + n))
    a = shapes.astype(np.float64).copy()
    boost = np.ones(n)
    c = np.zeros(n, dtype=np.uint64)
    small = a < 1.0
    if small.any():
        c[small] = 1
        boost[small] = rng.uniforms_open(keys[small], 1) ** (1.0 / a[small])
        a[small] += 1.0
    d = a - 1.0 / 3.0
    cc = 1.0 / np.sqrt(9.0 * d)
    pending = np.arange(n)
    while pending.size:
        kp = keys[pending]
        cp = c[pending]
        u1 = rng.uniforms_open(kp, cp + np.uint64(1))
        u2 = rng.uniforms(kp, cp + np.uint64(2))
        u3 = rng.uniforms_open(kp, cp + np.uint64(3))
        c[pending] = cp + np.uint64(3)
        x = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        v = 1.0 + cc[pending] * x
        ok = v > 0.0
        v3 = np.where(ok, v, 1.0) ** 3
        dp = d[pending]
        with np.errstate(invalid="ignore", divide="ignore"):
            acc = ok & (np.log(u3) < 0.5 * x * x + dp - dp * v3 + dp * np.log(v3))
        done = pending[acc]
        out[done] = dp[acc] * v3[acc] * boost[done]
        pending = pending[~acc]


def gamma_variates(shapes, seed, *, first=0, backend=None):
    """Unit-scale Gamma variates, one per entry of ``shapes`` (stream ``first + i``)."""
    backend = resolve_backend(backend)
    shapes = np.ascontiguousarray(shapes, dtype=np.float64).ravel()
    out = np.empty(shapes.shape[0])
    fn = _gamma_nb if backend == "numba" else _gamma_np
    fn(np.uint64(int(seed) & rng.MASK64), int(first), shapes, out)
    return out
