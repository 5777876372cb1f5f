"""Numba-compiled inner loops for the event-batch coordinate ascent.

The math mirrors probit.py and online.py exactly; this module only removes
interpreter overhead from the per-batch fixed-point iteration so streams run
at tens of thousands of rating events per second.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_TAIL_Z = 6.0


@njit(cache=True, fastmath=False)
def _erfcx(x: float) -> float:
    # exp(x^2)*erfc(x); direct product is exact until erfc underflows
    if x < 25.0:
        return math.exp(x * x) * math.erfc(x)
    inv2 = 1.0 / (x * x)
    s = 1.0 + inv2 * (-0.5 + inv2 * (0.75 + inv2 * (-1.875 + inv2 * 6.5625)))
    return s / (x * _SQRT_PI)


@njit(cache=True, fastmath=False)
def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT_2PI


@njit(cache=True, fastmath=False)
def _ndtr(x: float) -> float:
    return 0.5 * math.erfc(-x * _INV_SQRT2)


@njit(cache=True, fastmath=False)
def _upper_tail_mean(e: float, f: float) -> float:
    ee = _erfcx(e * _INV_SQRT2)
    if f > 1e300:
        d = 0.0
        ef = 0.0
    else:
        d = math.exp(0.5 * (e - f) * (e + f))
        ef = _erfcx(f * _INV_SQRT2)
    z = 0.5 * (ee - d * ef)
    if z <= 0.0:
        return math.nan
    return (1.0 - d) / _SQRT_2PI / z


@njit(cache=True, fastmath=False)
def tg_mean_clamped(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Mean of N(mu, sigma^2) truncated to (lo, hi], nearest-bound fallback."""
    e = (lo - mu) / sigma
    f = (hi - mu) / sigma
    if e >= _TAIL_Z:
        m1 = _upper_tail_mean(e, f)
        if math.isnan(m1):
            m1 = e  # mass collapses onto the lower bound
        return mu + sigma * m1
    if f <= -_TAIL_Z:
        m1 = _upper_tail_mean(-f, -e)
        if math.isnan(m1):
            m1 = -f
        return mu - sigma * m1
    z = _ndtr(f) - _ndtr(e)
    if z < 1e-300:
        if abs(mu - hi) <= abs(mu - lo):
            return hi
        return lo
    pe = _phi(e) if e > -1e300 else 0.0
    pf = _phi(f) if f < 1e300 else 0.0
    return mu + sigma * (pe - pf) / z


@njit(cache=True, fastmath=False)
def _inv_spd(a, out):
    """Small symmetric positive-definite inverse via Cholesky, with jitter retry."""
    d = a.shape[0]
    c = np.zeros((d, d))
    jitter = 0.0
    for attempt in range(2):
        ok = True
        for i in range(d):
            for j in range(i + 1):
                s = a[i, j]
                if i == j:
                    s += jitter
                for k in range(j):
                    s -= c[i, k] * c[j, k]
                if i == j:
                    if s <= 0.0:
                        ok = False
                        break
                    c[i, i] = math.sqrt(s)
                else:
                    c[i, j] = s / c[j, j]
            if not ok:
                break
        if ok:
            break
        jitter = 1e-9
    # invert L, then out = L^-T L^-1
    li = np.zeros((d, d))
    for i in range(d):
        li[i, i] = 1.0 / c[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s -= c[i, k] * li[k, j]
            li[i, j] = s / c[i, i]
    for i in range(d):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, d):
                s += li[k, i] * li[k, j]
            out[i, j] = s
            out[j, i] = s


@njit(cache=True, fastmath=False)
def tg_moments_clamped(mu: float, sigma: float, lo: float, hi: float):
    """(mean, second moment) of N(mu, sigma^2) on (lo, hi], boundary fallback.

    A cell with numerically zero mass collapses onto the boundary nearest mu.
    """
    e = (lo - mu) / sigma
    f = (hi - mu) / sigma
    reflect = False
    if f <= -_TAIL_Z:
        e, f = -f, -e
        reflect = True
    if e >= _TAIL_Z:
        ee = _erfcx(e * _INV_SQRT2)
        if f > 1e300:
            dd = 0.0
            ef = 0.0
        else:
            dd = math.exp(0.5 * (e - f) * (e + f))
            ef = _erfcx(f * _INV_SQRT2)
        z = 0.5 * (ee - dd * ef)
        if z <= 0.0 or not math.isfinite(z):
            # boundary nearest mu: the cell edge closest to the bulk
            bx = mu - sigma * e if reflect else mu + sigma * e
            return bx, bx * bx
        m1 = (1.0 - dd) / _SQRT_2PI / z
        fpf = 0.0 if f > 1e300 else f * dd / _SQRT_2PI
        m2 = 1.0 + (e / _SQRT_2PI - fpf) / z
        if reflect:
            m1 = -m1
    else:
        z = _ndtr(f) - _ndtr(e)
        if z < 1e-300:
            bx = hi if abs(mu - hi) <= abs(mu - lo) else lo
            return bx, bx * bx
        pe = _phi(e) if e > -1e300 else 0.0
        pf = _phi(f) if f < 1e300 else 0.0
        m1 = (pe - pf) / z
        epe = e * pe if e > -1e300 else 0.0
        fpf = f * pf if f < 1e300 else 0.0
        m2 = 1.0 + (epe - fpf) / z
    mean = mu + sigma * m1
    second = mu * mu + 2.0 * mu * sigma * m1 + sigma * sigma * m2
    return mean, second


@njit(cache=True, fastmath=False)
def rts_smooth(times, means, covs, sigma2):
    """Backward smoothing along one entity's event times.

    Transition between adjacent times is identity-mean Brownian with
    covariance sigma2*tau*I. Returns smoothed means, covariances and the
    adjacent cross-covariances Cov(state_{k+1}, state_k | all data).
    """
    n, d = means.shape
    sm = means.copy()
    sc = covs.copy()
    cross = np.empty((n - 1 if n > 1 else 0, d, d))
    p_pred = np.empty((d, d))
    inv = np.empty((d, d))
    for k in range(n - 2, -1, -1):
        tau = times[k + 1] - times[k]
        for a in range(d):
            for b in range(d):
                p_pred[a, b] = covs[k, a, b]
            p_pred[a, a] += sigma2 * tau
        _inv_spd(p_pred, inv)
        gain = covs[k] @ inv
        sm[k] = means[k] + gain @ (sm[k + 1] - means[k])
        cov = covs[k] + gain @ (sc[k + 1] - p_pred) @ gain.T
        for a in range(d):
            for b in range(a + 1):
                v = 0.5 * (cov[a, b] + cov[b, a])
                sc[k, a, b] = v
                sc[k, b, a] = v
        cross[k] = sc[k + 1] @ gain.T
    return sm, sc, cross


@njit(cache=True, fastmath=False)
def pair_increments(times, sm, sc, cross):
    """Per adjacent pair: (E[squared increment], elapsed time)."""
    n, d = sm.shape
    e2 = np.empty(n - 1 if n > 1 else 0)
    tau = np.empty(e2.shape[0])
    for k in range(n - 1):
        s = 0.0
        for a in range(d):
            dm = sm[k + 1, a] - sm[k, a]
            s += dm * dm + sc[k + 1, a, a] + sc[k, a, a] - 2.0 * cross[k, a, a]
        e2[k] = s
        tau[k] = times[k + 1] - times[k]
    return e2, tau


@njit(cache=True, fastmath=False)
def rating_residual(mu_u, cov_u, mu_v, cov_v, sigma_e, lo, hi):
    """E[(X - U'V)^2] for one rating under smoothed factorized moments."""
    d = mu_u.shape[0]
    mu = 0.0
    for a in range(d):
        mu += mu_u[a] * mu_v[a]
    ex, ex2 = tg_moments_clamped(mu, sigma_e, lo, hi)
    tr = 0.0
    for a in range(d):
        for b in range(d):
            tr += (cov_u[a, b] + mu_u[a] * mu_u[b]) * (cov_v[b, a] + mu_v[b] * mu_v[a])
    return ex2 - 2.0 * ex * mu + tr


@njit(cache=True, fastmath=False)
def single_ascent(
    m0_u, c0_u, tau_u, s2_u, init_u,
    m0_v, c0_v, tau_v, s2_v, init_v,
    lo, hi, sigma_e, mean_tol, max_passes,
):
    """Coordinate ascent for a batch holding exactly one rating.

    m0_*/c0_*: stored posterior moments at the entity's last event time;
    propagation to the batch time happens here (diagonal += s2*tau).
    init_*: starting mean iterates (callers pass a symmetry-breaking seed
    when the stored mean is exactly zero, otherwise the stored mean).
    """
    d = m0_u.shape[0]
    inv_s2e = 1.0 / (sigma_e * sigma_e)
    p0_u = c0_u.copy()
    p0_v = c0_v.copy()
    for a in range(d):
        p0_u[a, a] += s2_u * tau_u
        p0_v[a, a] += s2_v * tau_v
    p0inv_u = np.empty((d, d))
    p0inv_v = np.empty((d, d))
    _inv_spd(p0_u, p0inv_u)
    _inv_spd(p0_v, p0inv_v)
    b0_u = p0inv_u @ m0_u
    b0_v = p0inv_v @ m0_v

    mean_u = init_u.copy()
    cov_u = p0_u.copy()
    mean_v = init_v.copy()
    cov_v = p0_v.copy()
    mu_prior = 0.0
    mu = 0.0
    for a in range(d):
        mu_prior += m0_u[a] * m0_v[a]
        mu += init_u[a] * init_v[a]
    x = tg_mean_clamped(mu, sigma_e, lo, hi)

    prec = np.empty((d, d))
    rhs = np.empty(d)
    passes = 0
    for _ in range(max_passes):
        passes += 1
        delta = 0.0
        # user update given item iterate and x
        for a in range(d):
            rhs[a] = b0_u[a] + inv_s2e * x * mean_v[a]
            for b in range(d):
                prec[a, b] = p0inv_u[a, b] + inv_s2e * (cov_v[a, b] + mean_v[a] * mean_v[b])
        _inv_spd(prec, cov_u)
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += cov_u[a, b] * rhs[b]
            diff = abs(s - mean_u[a])
            if diff > delta:
                delta = diff
            mean_u[a] = s
        # item update given user iterate and x
        for a in range(d):
            rhs[a] = b0_v[a] + inv_s2e * x * mean_u[a]
            for b in range(d):
                prec[a, b] = p0inv_v[a, b] + inv_s2e * (cov_u[a, b] + mean_u[a] * mean_u[b])
        _inv_spd(prec, cov_v)
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += cov_v[a, b] * rhs[b]
            diff = abs(s - mean_v[a])
            if diff > delta:
                delta = diff
            mean_v[a] = s
        mu = 0.0
        for a in range(d):
            mu += mean_u[a] * mean_v[a]
        x = tg_mean_clamped(mu, sigma_e, lo, hi)
        if delta < mean_tol:
            break
    mu_post = 0.0
    for a in range(d):
        mu_post += mean_u[a] * mean_v[a]
    return p0_u, p0_v, mean_u, cov_u, mean_v, cov_v, mu_prior, mu_post, x, passes


@njit(cache=True, fastmath=False)
def batch_ascent(
    m0_u, p0_u, mean_u, cov_u,
    m0_v, p0_v, mean_v, cov_v,
    r_u, r_v, r_lo, r_hi,
    sigma_e, mean_tol, max_passes,
):
    """Coordinate ascent for one event batch.

    m0_*/p0_*: propagated prior moments (held fixed across passes).
    mean_*/cov_*: iterate moments, updated in place (callers may pre-seed
    means to break the zero-mean symmetry).
    r_u/r_v: local entity index per rating; r_lo/r_hi: truncation cell.
    Returns (x, passes) with x the converged per-rating likeness means.
    """
    n_u, d = m0_u.shape
    n_v = m0_v.shape[0]
    n_r = r_u.shape[0]
    inv_s2e = 1.0 / (sigma_e * sigma_e)

    p0inv_u = np.empty((n_u, d, d))
    b0_u = np.empty((n_u, d))
    for k in range(n_u):
        _inv_spd(p0_u[k], p0inv_u[k])
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += p0inv_u[k, a, b] * m0_u[k, b]
            b0_u[k, a] = s
    p0inv_v = np.empty((n_v, d, d))
    b0_v = np.empty((n_v, d))
    for k in range(n_v):
        _inv_spd(p0_v[k], p0inv_v[k])
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += p0inv_v[k, a, b] * m0_v[k, b]
            b0_v[k, a] = s

    x = np.empty(n_r)
    for r in range(n_r):
        mu = 0.0
        for a in range(d):
            mu += mean_u[r_u[r], a] * mean_v[r_v[r], a]
        x[r] = tg_mean_clamped(mu, sigma_e, r_lo[r], r_hi[r])

    prec = np.empty((max(n_u, n_v), d, d))
    rhs = np.empty((max(n_u, n_v), d))
    passes = 0
    for _ in range(max_passes):
        passes += 1
        delta = 0.0
        # user side
        for k in range(n_u):
            for a in range(d):
                rhs[k, a] = b0_u[k, a]
                for b in range(d):
                    prec[k, a, b] = p0inv_u[k, a, b]
        for r in range(n_r):
            k = r_u[r]
            j = r_v[r]
            cx = inv_s2e * x[r]
            for a in range(d):
                va = mean_v[j, a]
                rhs[k, a] += cx * va
                for b in range(d):
                    prec[k, a, b] += inv_s2e * (cov_v[j, a, b] + va * mean_v[j, b])
        for k in range(n_u):
            _inv_spd(prec[k], cov_u[k])
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += cov_u[k, a, b] * rhs[k, b]
                diff = abs(s - mean_u[k, a])
                if diff > delta:
                    delta = diff
                mean_u[k, a] = s
        # item side
        for k in range(n_v):
            for a in range(d):
                rhs[k, a] = b0_v[k, a]
                for b in range(d):
                    prec[k, a, b] = p0inv_v[k, a, b]
        for r in range(n_r):
            k = r_v[r]
            j = r_u[r]
            cx = inv_s2e * x[r]
            for a in range(d):
                ua = mean_u[j, a]
                rhs[k, a] += cx * ua
                for b in range(d):
                    prec[k, a, b] += inv_s2e * (cov_u[j, a, b] + ua * mean_u[j, b])
        for k in range(n_v):
            _inv_spd(prec[k], cov_v[k])
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += cov_v[k, a, b] * rhs[k, b]
                diff = abs(s - mean_v[k, a])
                if diff > delta:
                    delta = diff
                mean_v[k, a] = s
        # likeness refresh
        for r in range(n_r):
            mu = 0.0
            for a in range(d):
                mu += mean_u[r_u[r], a] * mean_v[r_v[r], a]
            x[r] = tg_mean_clamped(mu, sigma_e, r_lo[r], r_hi[r])
        if delta < mean_tol:
            break
    return x, passes
