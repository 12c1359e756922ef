"""Post-transition (Phase III) hierarchical AR(1) model."""
from __future__ import annotations

import math

import numpy as np

from .phase2 import PHASE_III, layout, norm_logpdf
from .samplers import slice_sample, truncnorm_draw, truncnorm_logpdf
from .types import ModelState

MU_C_BOUNDS = (0.0, 10.0)
RHO_C_BOUNDS = (0.0, 1.0)
HYPER3_BOUNDS = {
    "mu_bar": (0.0, 2.1),
    "sigma_mu": (0.0, 0.318),
    "rho_bar": (0.0, 1.0),
    "sigma_rho": (0.0, 0.289),
    "sigma_eps": (0.0, 0.5),
}
HYPER3_WIDTHS = {"mu_bar": 0.3, "sigma_mu": 0.05, "rho_bar": 0.2, "sigma_rho": 0.05, "sigma_eps": 0.05}


def phase3_pairs(state: ModelState, f=None):
    """Country rows and (f_t, f_{t+1}) pairs of every Phase III transition."""
    f = state.tfr if f is None else f
    mask = layout(state).ptype == PHASE_III
    rows, t = np.nonzero(mask)
    return rows, f[rows, t], f[rows, t + 1]


def phase3_loglik(state: ModelState, country: int) -> float:
    """AR(1) log density of one country's transitions from lambda on."""
    i = state.row(country)
    rows, x, y = phase3_pairs(state)
    sel = rows == i
    mu, rho = state.mu_c[i], state.rho_c[i]
    return float(np.sum(norm_logpdf(y[sel], mu + rho * (x[sel] - mu), state.hyper3.sigma_eps)))


def mu_conditional(x, y, rho, sigma_eps, mu_bar, sigma_mu):
    """Untruncated normal conditional ``(mean, sd)`` of mu_c given its data.

    ``y - rho x = (1 - rho) mu + eps``.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    k = 1.0 - rho
    prec = 1.0 / sigma_mu ** 2 + x.size * k * k / sigma_eps ** 2
    mean = (mu_bar / sigma_mu ** 2 + k * np.sum(y - rho * x) / sigma_eps ** 2) / prec
    return mean, 1.0 / math.sqrt(prec)


def rho_conditional(x, y, mu, sigma_eps, rho_bar, sigma_rho):
    """Untruncated normal conditional ``(mean, sd)`` of rho_c.

    ``y - mu = rho (x - mu) + eps``.
    """
    xc, yc = np.asarray(x, float) - mu, np.asarray(y, float) - mu
    prec = 1.0 / sigma_rho ** 2 + np.sum(xc * xc) / sigma_eps ** 2
    mean = (rho_bar / sigma_rho ** 2 + np.sum(xc * yc) / sigma_eps ** 2) / prec
    return mean, 1.0 / math.sqrt(prec)


def _grouped(rows, values, n):
    return np.bincount(rows, weights=values, minlength=n)


def gibbs_country_phase3(state: ModelState, rng) -> None:
    """Draw mu_c then rho_c for every Phase III country from truncated normals."""
    h = state.hyper3
    rows, x, y = phase3_pairs(state)
    idx = np.flatnonzero(state.in_phase3)
    if idx.size == 0:
        return
    n = state.n_countries
    cnt = np.bincount(rows, minlength=n).astype(float)
    s2 = h.sigma_eps ** 2

    rho = state.rho_c
    k = 1.0 - rho
    r_i = rho[rows]
    prec = 1.0 / h.sigma_mu ** 2 + cnt * k * k / s2
    mean = (h.mu_bar / h.sigma_mu ** 2 + k * _grouped(rows, y - r_i * x, n) / s2) / prec
    mu_new = truncnorm_draw(mean[idx], 1.0 / np.sqrt(prec[idx]), *MU_C_BOUNDS, rng)
    state.mu_c[idx] = mu_new

    m_i = state.mu_c[rows]
    xc, yc = x - m_i, y - m_i
    prec = 1.0 / h.sigma_rho ** 2 + _grouped(rows, xc * xc, n) / s2
    mean = (h.rho_bar / h.sigma_rho ** 2 + _grouped(rows, xc * yc, n) / s2) / prec
    rho_new = truncnorm_draw(mean[idx], 1.0 / np.sqrt(prec[idx]), *RHO_C_BOUNDS, rng)
    # the draw can round onto a closed endpoint
    state.rho_c[idx] = np.clip(rho_new, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def slice_phase3_hyper(state: ModelState, rng) -> None:
    h = state.hyper3
    idx = np.flatnonzero(state.in_phase3)
    mu_c, rho_c = state.mu_c[idx], state.rho_c[idx]
    rows, x, y = phase3_pairs(state)
    mu_r, rho_r = state.mu_c[rows], state.rho_c[rows]
    resid = y - (mu_r + rho_r * (x - mu_r))

    def mu_ll(mu_bar, sigma_mu):
        return float(np.sum(truncnorm_logpdf(mu_c, mu_bar, sigma_mu, *MU_C_BOUNDS)))

    def rho_ll(rho_bar, sigma_rho):
        return float(np.sum(truncnorm_logpdf(rho_c, rho_bar, sigma_rho, *RHO_C_BOUNDS)))

    def eps_ll(sigma_eps):
        return float(np.sum(norm_logpdf(resid, 0.0, sigma_eps)))

    targets = {
        "mu_bar": lambda v: mu_ll(v, h.sigma_mu),
        "sigma_mu": lambda v: mu_ll(h.mu_bar, v),
        "rho_bar": lambda v: rho_ll(v, h.sigma_rho),
        "sigma_rho": lambda v: rho_ll(h.rho_bar, v),
        "sigma_eps": eps_ll,
    }
    for name, fn in targets.items():
        lo, hi = HYPER3_BOUNDS[name]

        def logdens(v, fn=fn, lo=lo, hi=hi):
            if not lo < v <= hi:
                return -math.inf
            return fn(v)

        val, _ = slice_sample(getattr(h, name), logdens, rng, HYPER3_WIDTHS[name], lo, hi)
        setattr(h, name, val)


def sample_phase3_sweep(state: ModelState, rng, tuning=None) -> ModelState:
    """Gibbs for mu_c, rho_c then slice updates of the world hyperparameters.

    ``tuning`` is accepted for interface symmetry; Phase III has no adaptive
    proposals.
    """
    if not state.in_phase3.any():
        return state
    gibbs_country_phase3(state, rng)
    slice_phase3_hyper(state, rng)
    return state


def draw_phase3_country(hyper3, rng, size=None):
    """Draw (mu_c, rho_c) from the hierarchical prior, for countries that
    enter Phase III only during projection."""
    mu = truncnorm_draw(np.full(size or 1, hyper3.mu_bar), hyper3.sigma_mu, *MU_C_BOUNDS, rng)
    rho = truncnorm_draw(np.full(size or 1, hyper3.rho_bar), hyper3.sigma_rho, *RHO_C_BOUNDS, rng)
    return (mu, rho) if size else (float(mu[0]), float(rho[0]))
