"""Ordered-probit discretization and truncated-Gaussian moment kernels.

The rating likelihood treats an observed level k as the event that a latent
Gaussian fell in (pi_k, pi_{k+1}]. Posterior updates need the mean and
second moment of that Gaussian truncated to the observed cell; far-tail
cells are evaluated via scaled-complementary-error-function (Mills ratio)
forms so the kernels stay accurate when the cell carries almost no mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, ndtr

from .events import RatingScale

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# beyond this |z| the naive pdf/cdf ratio loses digits; switch to erfcx forms
_TAIL_Z = 6.0


class DegenerateTruncationError(ArithmeticError):
    """The truncation cell carries numerically zero probability mass."""


@dataclass(frozen=True)
class TruncatedGaussian:
    mu: float
    sigma: float
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / _SQRT_2PI


def normal_cdf(x: float) -> float:
    # scipy's ndtr is accurate to ~1e-16 relative in both tails
    return float(ndtr(x))


def default_thresholds(K: int, anchor: float, step: float) -> RatingScale:
    """Evenly spaced interior thresholds: anchor, anchor+step, ...

    anchor is the boundary between levels 1 and 2.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if not step > 0:
        raise ValueError("step must be positive")
    interior = [anchor + k * step for k in range(K - 1)]
    return RatingScale(K=K, thresholds=(-math.inf, *interior, math.inf))


def discretize(x: float, scale: RatingScale) -> int:
    """Level k such that x lies in (pi_k, pi_{k+1}]."""
    interior = scale.thresholds[1:-1]
    # count of interior thresholds strictly below x
    lo, hi = 0, len(interior)
    while lo < hi:
        mid = (lo + hi) // 2
        if interior[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo + 1


def _std_trunc_moments(e: float, f: float) -> tuple[float, float]:
    """First two moments of a standard normal truncated to (e, f).

    Returns (E[Z], E[Z^2]). Handles infinite endpoints and far tails.
    """
    if e >= _TAIL_Z:  # cell deep in the upper tail
        return _upper_tail_moments(e, f)
    if f <= -_TAIL_Z:  # deep lower tail, reflect
        m1, m2 = _upper_tail_moments(-f, -e)
        return -m1, m2
    z = ndtr(f) - ndtr(e)
    if z < 1e-300:
        raise DegenerateTruncationError(f"zero mass in ({e:g}, {f:g})")
    pdf_e = normal_pdf(e) if math.isfinite(e) else 0.0
    pdf_f = normal_pdf(f) if math.isfinite(f) else 0.0
    m1 = (pdf_e - pdf_f) / z
    epe = e * pdf_e if math.isfinite(e) else 0.0
    fpf = f * pdf_f if math.isfinite(f) else 0.0
    m2 = 1.0 + (epe - fpf) / z
    return m1, m2


def _upper_tail_moments(e: float, f: float) -> tuple[float, float]:
    """Moments for a cell entirely in the far upper tail (e >= _TAIL_Z).

    Everything is scaled by exp(e^2/2) so no term underflows:
      Z        = [erfcx(e/sqrt2) - D*erfcx(f/sqrt2)] / 2 * exp(-e^2/2)
      phi(e)-phi(f) = (1 - D) / sqrt(2*pi)          * exp(-e^2/2)
    with D = exp((e^2 - f^2)/2) <= 1.
    """
    ee = erfcx(e * _INV_SQRT2)
    if math.isinf(f):
        d = 0.0
        ef = 0.0
    else:
        d = math.exp(0.5 * (e - f) * (e + f))  # exp((e^2-f^2)/2), in (0,1]
        ef = erfcx(f * _INV_SQRT2)
    z_scaled = 0.5 * (ee - d * ef)
    if z_scaled <= 0.0 or not math.isfinite(z_scaled):
        raise DegenerateTruncationError(f"zero mass in ({e:g}, {f:g})")
    m1 = (1.0 - d) / _SQRT_2PI / z_scaled
    fpf_scaled = 0.0 if math.isinf(f) else f * d / _SQRT_2PI
    m2 = 1.0 + (e / _SQRT_2PI - fpf_scaled) / z_scaled
    return m1, m2


def tg_mean(tg: TruncatedGaussian) -> float:
    """Mean of a Gaussian truncated to (lo, hi]."""
    e = (tg.lo - tg.mu) / tg.sigma
    f = (tg.hi - tg.mu) / tg.sigma
    m1, _ = _std_trunc_moments(e, f)
    return tg.mu + tg.sigma * m1


def tg_second_moment(tg: TruncatedGaussian) -> float:
    """E[X^2] of a Gaussian truncated to (lo, hi]."""
    e = (tg.lo - tg.mu) / tg.sigma
    f = (tg.hi - tg.mu) / tg.sigma
    m1, m2 = _std_trunc_moments(e, f)
    return tg.mu * tg.mu + 2.0 * tg.mu * tg.sigma * m1 + tg.sigma * tg.sigma * m2


def tg_moments(mu: float, sigma: float, lo: float, hi: float) -> tuple[float, float]:
    """(mean, second moment) of N(mu, sigma^2) truncated to (lo, hi]."""
    e = (lo - mu) / sigma
    f = (hi - mu) / sigma
    m1, m2 = _std_trunc_moments(e, f)
    return mu + sigma * m1, mu * mu + 2.0 * mu * sigma * m1 + sigma * sigma * m2


def tg_mean_clamped(mu: float, sigma: float, lo: float, hi: float) -> float:
    """tg mean with a nearest-boundary fallback when the cell has no mass."""
    try:
        m1, _ = _std_trunc_moments((lo - mu) / sigma, (hi - mu) / sigma)
        return mu + sigma * m1
    except DegenerateTruncationError:
        # mass concentrates at the cell boundary nearest the Gaussian mean
        if math.isinf(lo):
            return hi
        if math.isinf(hi):
            return lo
        return hi if abs(mu - hi) <= abs(mu - lo) else lo
