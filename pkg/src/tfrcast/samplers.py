"""Generic MCMC building blocks: slice sampling, random-walk Metropolis and
proposal-scale adaptation."""
from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri
from scipy.stats import truncnorm

TARGET_ACCEPT = 0.3
ADAPT_EXPONENT = 0.6


def slice_sample(x0, logdens, rng, width, lower=-np.inf, upper=np.inf,
                 max_steps=32, logp0=None):
    """One univariate slice-sampling update with stepping out and shrinkage.

    ``logdens`` may return ``-inf`` outside the support; ``lower``/``upper``
    clip the bracket so it never leaves the support. Returns ``(x, logp)``.
    """
    lp0 = logdens(x0) if logp0 is None else logp0
    log_y = lp0 + np.log(rng.uniform())
    u = rng.uniform()
    left = x0 - width * u
    right = left + width
    j = int(np.floor(max_steps * rng.uniform()))
    k = max_steps - 1 - j
    while j > 0 and left > lower and logdens(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and right < upper and logdens(right) > log_y:
        right += width
        k -= 1
    left = max(left, lower)
    right = min(right, upper)
    while True:
        x1 = left + (right - left) * rng.uniform()
        lp1 = logdens(x1)
        if lp1 > log_y:
            return x1, lp1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-14 * max(1.0, abs(x0)):
            return x0, lp0


def metropolis_accept(log_ratio, rng) -> np.ndarray:
    """Accept with probability ``min(1, exp(log_ratio))``, elementwise.

    Non-finite ratios are rejected.
    """
    log_ratio = np.asarray(log_ratio, dtype=float)
    u = rng.uniform(size=log_ratio.shape)
    with np.errstate(invalid="ignore"):
        return np.isfinite(log_ratio) & (np.log(u) < log_ratio)


def rw_metropolis_step(x, logpost_x, logpost, scale, rng):
    """Symmetric Gaussian random-walk step for a scalar or vector of
    independent coordinates. Returns ``(x_new, logpost_new, accepted)``."""
    x = np.asarray(x, dtype=float)
    prop = x + scale * rng.standard_normal(x.shape)
    lp_prop = logpost(prop)
    acc = metropolis_accept(lp_prop - logpost_x, rng)
    return np.where(acc, prop, x), np.where(acc, lp_prop, logpost_x), acc


def truncnorm_propose(x, scale, lower, upper, rng):
    """Draw from N(x, scale^2) truncated to (lower, upper).

    Returns the proposal and the Hastings correction
    ``log q(x | x') - log q(x' | x)``.
    """
    a = ndtr((lower - x) / scale)
    b = ndtr((upper - x) / scale)
    u = a + (b - a) * rng.uniform(size=np.shape(x))
    u = np.clip(u, 1e-300, 1 - 1e-16)
    prop = x + scale * ndtri(u)
    prop = np.clip(prop, np.nextafter(lower, upper), np.nextafter(upper, lower))
    z_fwd = b - a
    z_bwd = ndtr((upper - prop) / scale) - ndtr((lower - prop) / scale)
    with np.errstate(divide="ignore"):
        return prop, np.log(z_fwd) - np.log(z_bwd)


def _reflect(a, b):
    # put the bulk of the mass in the lower tail where ndtr is accurate
    flip = (a + b) > 0
    return np.where(flip, -b, a), np.where(flip, -a, b), flip


def truncnorm_draw(mean, sd, lower, upper, rng):
    """Inverse-CDF draw from N(mean, sd^2) truncated to [lower, upper]."""
    mean = np.asarray(mean, dtype=float)
    sd = np.broadcast_to(np.asarray(sd, dtype=float), mean.shape)
    a, b, flip = _reflect((lower - mean) / sd, (upper - mean) / sd)
    pa, pb = ndtr(a), ndtr(b)
    u = rng.uniform(size=mean.shape)
    z = ndtri(pa + u * (pb - pa))
    bad = ~(pb > pa) | ~np.isfinite(z)
    if np.any(bad):
        # mass beyond double precision of ndtr: defer to scipy's tail code
        z = np.where(bad, truncnorm.ppf(u, np.where(bad, a, -1.0), np.where(bad, b, 1.0)), z)
    z = np.clip(z, a, b)
    return mean + sd * np.where(flip, -z, z)


def truncnorm_logpdf(x, mean, sd, lower, upper):
    """Log density of N(mean, sd^2) truncated to [lower, upper]."""
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    a, b, _ = _reflect((lower - mean) / sd, (upper - mean) / sd)
    la, lb = log_ndtr(a), log_ndtr(b)
    with np.errstate(divide="ignore"):
        log_z = lb + np.log1p(-np.exp(la - lb))
    out = -0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi) - log_z
    return np.where((x >= lower) & (x <= upper), out, -np.inf)


def adapt_log_scale(log_scale, accepted, iteration, target=TARGET_ACCEPT):
    """Robbins-Monro update of log proposal scales toward ``target``."""
    gain = (iteration + 1.0) ** -ADAPT_EXPONENT
    return log_scale + gain * (np.asarray(accepted, dtype=float) - target)
