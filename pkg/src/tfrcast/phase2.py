"""Fertility-transition (Phase II) model with the Phase I random walk.

Transitions ``t -> t+1`` of every country are classified once from the phase
markers: Phase I random walk (``t < tau``), start of Phase II (``t == tau``),
Phase II (``tau < t < lambda``) and Phase III (``t >= lambda``). All log
densities are evaluated as an ``(n_countries, n_periods - 1)`` matrix so a
sweep can update every country, or a stride of latent TFR cells, at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, softmax

from .samplers import (
    adapt_log_scale,
    metropolis_accept,
    slice_sample,
    truncnorm_propose,
)
from .types import (
    TFR_BOUNDS,
    U_UPPER,
    ModelState,
    Phase2CountryParams,
    Phase2Hyper,
    dc_from_star,
    delta4_from_prime,
)

LOGIT_SCALE = 2.0 * math.log(9.0)
SD_FLOOR = 1e-8
C1975_YEAR = 1975
_LOG_2PI = math.log(2.0 * math.pi)

PHASE_I, PHASE_II_START, PHASE_II, PHASE_III = 0, 1, 2, 3

# Level 4 prior constants
CHI_PRIOR = (-1.5, 0.6)
PSI_PREC_PRIOR = (1.0, 0.6 ** 2)  # Gamma(shape, rate) on 1/psi^2
DELTA4_HYPER_PRIOR = (0.3, 1.0)
DELTA_PREC_PRIOR = (1.0, 1.0)
ALPHA_PRIOR_MEAN = np.array([-1.0, 0.5, 1.5])
ALPHA_PRIOR_SD = 1.0
S_TAU_PREC_PRIOR = (1.0, 0.4 ** 2)
M_TAU_PRIOR = (0.0, 0.4)
SIGMA0_MAX = 0.6
A_BOUNDS = B_BOUNDS = (0.0, 0.2)
S_BOUNDS = (3.5, 6.5)
C_BOUNDS = (0.8, 2.0)
PHI_BOUNDS = (0.0, 1.0)

SIGMA0_MIN_FIVE_YEAR = 0.01
SIGMA0_MIN_ANNUAL = 0.04

SLICE_WIDTHS = {"sigma0": 0.05, "a": 0.02, "b": 0.02, "S": 0.5, "const_c": 0.2, "phi": 0.1}


def default_sigma0_min(annual: bool) -> float:
    return SIGMA0_MIN_ANNUAL if annual else SIGMA0_MIN_FIVE_YEAR


def norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI


def gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def dl_decrement(f, delta1, delta3, delta4, U, dc):
    """Vectorised double-logistic decrement; arguments broadcast against ``f``."""
    rise = expit(-(LOGIT_SCALE / delta1) * (f - U + 0.5 * delta1))
    fall = expit(-(LOGIT_SCALE / delta3) * (f - delta4 - 0.5 * delta3))
    # expit(-x) = 1 - expit(x) without cancellation
    return -dc * (1.0 - rise) + dc * (1.0 - fall)


def double_logistic(f, params: Phase2CountryParams):
    """Expected decrement g(f) for one country's double-logistic parameters."""
    U = params.delta1 + params.delta2 + params.delta3 + params.delta4
    return dl_decrement(f, params.delta1, params.delta3, params.delta4, U, params.dc)


def distortion_sd(f, year, hyper: Phase2Hyper):
    """Level-dependent sd of Phase II distortions, floored at ``SD_FLOOR``."""
    f = np.asarray(f, dtype=float)
    mult = np.where(np.asarray(year) <= C1975_YEAR, hyper.const_c, 1.0)
    slope = np.where(f >= hyper.S, -hyper.a, hyper.b)
    sd = mult * (hyper.sigma0 + (f - hyper.S) * slope)
    return np.maximum(sd, SD_FLOOR)


@dataclass
class Layout:
    ptype: np.ndarray  # (n_c, n_t - 1) phase of each transition
    prev_ok: np.ndarray  # AR carry-over available
    years: np.ndarray  # start year of each transition, (n_t - 1,)
    key: tuple = ()

    @classmethod
    def from_state(cls, state: ModelState) -> "Layout":
        n_c, n_t = state.n_countries, state.grid.n_periods
        t = np.arange(n_t - 1)[None, :]
        tau = state.tau[:, None]
        lam = np.where(state.lam >= 0, state.lam, n_t)[:, None]
        ptype = np.full((n_c, n_t - 1), PHASE_II, dtype=np.int8)
        ptype[(tau >= 0) & (t < tau)] = PHASE_I
        ptype[(tau >= 0) & (t == tau)] = PHASE_II_START
        ptype[t >= lam] = PHASE_III
        prev_ok = (ptype == PHASE_II) & (t >= 1)
        return cls(ptype, prev_ok, state.grid.years[:-1], _layout_key(state))


def _layout_key(state):
    return (state.grid, state.tau.tobytes(), state.lam.tobytes())


def layout(state: ModelState) -> Layout:
    """Transition layout of ``state``, cached until its markers change."""
    lay = getattr(state, "_layout", None)
    if lay is None or lay.key != _layout_key(state):
        lay = Layout.from_state(state)
        object.__setattr__(state, "_layout", lay)
    return lay


def _deviation(f, U, gamma, delta4_prime, dc_star, annual):
    """Decrement minus its double-logistic expectation, per transition."""
    d4 = delta4_from_prime(delta4_prime)
    dc = dc_from_star(dc_star, annual)
    D = softmax(gamma, axis=1) * (U - d4)[:, None]
    f0 = f[:, :-1]
    g = dl_decrement(f0, D[:, 0:1], D[:, 2:3], d4[:, None], U[:, None], dc[:, None])
    u = (f0 - f[:, 1:]) - g
    bad = ~(U > d4)
    if bad.any():
        u[bad] = np.nan
    return u


def _ar_residual(u, prev_ok, phi):
    if phi is None:
        return u
    prev = np.zeros_like(u)
    prev[:, 1:] = u[:, :-1]
    return u - phi * np.where(prev_ok, prev, 0.0)


def transition_logdens(state: ModelState, f=None, U=None, gamma=None, delta4_prime=None,
                       dc_star=None, hyper2=None) -> np.ndarray:
    """Log density of every transition under the current phase structure.

    Keyword arguments override the corresponding state entries.
    """
    lay = layout(state)
    f = state.tfr if f is None else f
    U = state.U if U is None else U
    h2 = state.hyper2 if hyper2 is None else hyper2
    u = _deviation(
        f, U,
        state.gamma if gamma is None else gamma,
        state.delta4_prime if delta4_prime is None else delta4_prime,
        state.dc_star if dc_star is None else dc_star,
        state.annual,
    )
    f0, f1 = f[:, :-1], f[:, 1:]
    phi = h2.phi if state.ar_phase2 else None
    eps = _ar_residual(u, lay.prev_ok, phi)
    L = norm_logpdf(eps, 0.0, distortion_sd(f0, lay.years[None, :], h2))
    ptype = lay.ptype
    m = ptype == PHASE_II_START
    if m.any():
        L = np.where(m, norm_logpdf(u, h2.m_tau, h2.s_tau), L)
    m = ptype == PHASE_I
    if m.any():
        L = np.where(m, norm_logpdf(f1 - f0, 0.0, h2.s_tau), L)
    m = ptype == PHASE_III
    if m.any():
        mu = np.nan_to_num(state.mu_c)[:, None]
        rho = np.nan_to_num(state.rho_c)[:, None]
        L3 = norm_logpdf(f1, mu + rho * (f0 - mu), state.hyper3.sigma_eps)
        L = np.where(m, L3, L)
    return np.where(np.isnan(L), -np.inf, L)


def phase2_loglik(state: ModelState, country: int) -> float:
    """Phase I and Phase II transition log density for one country."""
    i = state.row(country)
    L = transition_logdens(state)[i]
    return float(L[layout(state).ptype[i] != PHASE_III].sum())


def measurement_loglik(state: ModelState, f=None) -> np.ndarray:
    """Per-observation log density of raw data given latent TFR."""
    ms = state.meas
    if not len(ms):
        return np.zeros(0)
    f = state.tfr if f is None else f
    mean = ms.w_lo * f[ms.country, ms.t_lo] + ms.w_hi * f[ms.country, ms.t_hi] + ms.bias
    return norm_logpdf(ms.y, mean, ms.sd)


def _country_prior(state: ModelState, gamma, delta4_prime, dc_star, U) -> np.ndarray:
    """Level 3 log prior per country (Phase II parameters)."""
    h = state.hyper2
    lp = norm_logpdf(dc_star, h.chi, h.psi)
    lp = lp + norm_logpdf(delta4_prime, h.Delta4, h.delta4)
    lp = lp + norm_logpdf(gamma, h.alpha[None, :], h.delta[None, :]).sum(axis=1)
    free = ~state.u_pinned
    if free.any():
        lo = state.u_lower
        inside = (U >= lo) & (U <= U_UPPER)
        with np.errstate(divide="ignore"):
            lu = np.where(inside, -np.log(U_UPPER - lo), -np.inf)
        lp = lp + np.where(free, lu, 0.0)
    return lp


def log_priors_phase2(state: ModelState) -> float:
    """Sum of Level 3 (country) and Level 4 (hyper) log prior densities.

    Inverse-variance hyperparameters are scored on the precision scale, as
    their Gamma priors are stated. Out-of-support values give ``-inf``.
    """
    h = state.hyper2
    lp = float(_country_prior(state, state.gamma, state.delta4_prime, state.dc_star, state.U).sum())
    lp += float(norm_logpdf(h.chi, *CHI_PRIOR))
    lp += float(gamma_logpdf(h.psi ** -2, *PSI_PREC_PRIOR))
    lp += float(norm_logpdf(h.Delta4, *DELTA4_HYPER_PRIOR))
    lp += float(gamma_logpdf(h.delta4 ** -2, *DELTA_PREC_PRIOR))
    lp += float(norm_logpdf(h.alpha, ALPHA_PRIOR_MEAN, ALPHA_PRIOR_SD).sum())
    lp += float(gamma_logpdf(h.delta ** -2, *DELTA_PREC_PRIOR).sum())
    lp += float(norm_logpdf(h.m_tau, *M_TAU_PRIOR))
    lp += float(gamma_logpdf(h.s_tau ** -2, *S_TAU_PREC_PRIOR))
    for value, (lo, hi) in (
        (h.sigma0, (state.sigma0_min, SIGMA0_MAX)), (h.a, A_BOUNDS), (h.b, B_BOUNDS),
        (h.S, S_BOUNDS), (h.const_c, C_BOUNDS),
    ):
        if not lo <= value <= hi:
            return -math.inf
        lp -= math.log(hi - lo)
    if state.ar_phase2 and not 0.0 < h.phi < 1.0:
        return -math.inf
    return lp


@dataclass
class Tuning:
    """Random-walk proposal scales (log) and acceptance bookkeeping.

    Scales adapt by Robbins-Monro while ``iteration < adapt_iters`` and are
    frozen afterwards; acceptance is only tallied once frozen.
    """

    log_scale: dict
    adapt_iters: int
    iteration: int = 0
    accepted: dict = field(default_factory=dict)
    proposed: dict = field(default_factory=dict)

    @classmethod
    def for_state(cls, state: ModelState, adapt_iters: int) -> "Tuning":
        n_c, n_t = state.n_countries, state.grid.n_periods
        tfr0 = 0.05 if state.annual else 0.15
        return cls(
            log_scale={
                "tfr": np.full((n_c, n_t), math.log(tfr0)),
                "gamma": np.full((n_c, 3), math.log(0.3)),
                "delta4_prime": np.full(n_c, math.log(0.3)),
                "dc_star": np.full(n_c, math.log(0.3)),
                "U": np.full(n_c, math.log(0.2)),
            },
            adapt_iters=adapt_iters,
        )

    @property
    def adapting(self) -> bool:
        return self.iteration < self.adapt_iters

    def record(self, name, accepted, mask=None, index=None):
        """Adapt the scales at ``index`` (or everywhere) and tally acceptance."""
        acc = np.asarray(accepted, dtype=float)
        if mask is not None:
            acc_m = acc[mask]
        else:
            acc_m = acc.ravel()
        if self.adapting:
            ls = self.log_scale[name]
            if index is None:
                new = adapt_log_scale(ls, acc, self.iteration)
                self.log_scale[name] = np.where(mask, new, ls) if mask is not None else new
            else:
                ls[index] = adapt_log_scale(ls[index], acc_m, self.iteration)
        else:
            self.accepted[name] = self.accepted.get(name, 0) + float(acc_m.sum())
            self.proposed[name] = self.proposed.get(name, 0) + int(acc_m.size)

    def acceptance_rate(self, name) -> float:
        n = self.proposed.get(name, 0)
        return self.accepted.get(name, 0.0) / n if n else float("nan")


# ---------------------------------------------------------------------------
# Gibbs updates of normal hierarchical hyperparameters


def _normal_mean_draw(rng, x, sd, prior_mean, prior_sd):
    prec = 1.0 / prior_sd ** 2 + x.size / sd ** 2
    mean = (prior_mean / prior_sd ** 2 + x.sum() / sd ** 2) / prec
    return mean + rng.standard_normal() / math.sqrt(prec)


def _sd_draw(rng, resid, shape0, rate0):
    shape = shape0 + resid.size / 2.0
    rate = rate0 + 0.5 * float(np.sum(resid ** 2))
    return 1.0 / math.sqrt(rng.gamma(shape, 1.0 / rate))


def gibbs_phase2_hyper(state: ModelState, rng) -> None:
    h = state.hyper2
    h.chi = _normal_mean_draw(rng, state.dc_star, h.psi, *CHI_PRIOR)
    h.psi = _sd_draw(rng, state.dc_star - h.chi, *PSI_PREC_PRIOR)
    h.Delta4 = _normal_mean_draw(rng, state.delta4_prime, h.delta4, *DELTA4_HYPER_PRIOR)
    h.delta4 = _sd_draw(rng, state.delta4_prime - h.Delta4, *DELTA_PREC_PRIOR)
    for i in range(3):
        h.alpha[i] = _normal_mean_draw(rng, state.gamma[:, i], h.delta[i],
                                       ALPHA_PRIOR_MEAN[i], ALPHA_PRIOR_SD)
        h.delta[i] = _sd_draw(rng, state.gamma[:, i] - h.alpha[i], *DELTA_PREC_PRIOR)

    lay = layout(state)
    f = state.tfr
    start = lay.ptype == PHASE_II_START
    u = _deviation(f, state.U, state.gamma, state.delta4_prime, state.dc_star, state.annual)
    u_tau = u[start]
    incr = (f[:, 1:] - f[:, :-1])[lay.ptype == PHASE_I]
    h.m_tau = _normal_mean_draw(rng, u_tau, h.s_tau, *M_TAU_PRIOR)
    h.s_tau = _sd_draw(rng, np.concatenate([u_tau - h.m_tau, incr]), *S_TAU_PREC_PRIOR)


# ---------------------------------------------------------------------------
# Country-level random-walk Metropolis


def _country_target(state, **override):
    L = transition_logdens(state, **override)
    args = {k: override.get(k, getattr(state, k)) for k in ("gamma", "delta4_prime", "dc_star", "U")}
    return L.sum(axis=1) + _country_prior(state, **args)


def mh_country_params(state: ModelState, rng, tuning: Tuning) -> None:
    cur = _country_target(state)
    blocks = [("gamma", j) for j in range(3)] + [("delta4_prime", None), ("dc_star", None)]
    free = ~state.u_pinned
    if free.any():
        blocks.append(("U", None))
    for name, col in blocks:
        ls = tuning.log_scale[name]
        scale = np.exp(ls[:, col] if col is not None else ls)
        value = getattr(state, name)
        prop = value.copy()
        step = scale * rng.standard_normal(state.n_countries)
        if col is None:
            prop = prop + step
        else:
            prop[:, col] = prop[:, col] + step
        new = _country_target(state, **{name: prop})
        acc = metropolis_accept(new - cur, rng)
        if name == "U":
            acc &= free
        if col is None:
            setattr(state, name, np.where(acc, prop, value))
        else:
            value[acc, col] = prop[acc, col]
        cur = np.where(acc, new, cur)
        if name == "U":
            tuning.record("U", acc, mask=free)
        elif col is None:
            tuning.record(name, acc)
        else:
            tuning.record(name, acc, index=(slice(None), col))


# ---------------------------------------------------------------------------
# Slice sampling of the variance-function parameters and phi


def slice_phase2_hyper(state: ModelState, rng) -> None:
    lay = layout(state)
    m2 = lay.ptype == PHASE_II
    if not m2.any():
        return
    f0 = state.tfr[:, :-1]
    u = _deviation(state.tfr, state.U, state.gamma, state.delta4_prime, state.dc_star, state.annual)
    years = np.broadcast_to(lay.years[None, :], f0.shape)[m2]
    f0m = f0[m2]
    prev = np.zeros_like(u)
    prev[:, 1:] = u[:, :-1]
    prev = np.where(lay.prev_ok, prev, 0.0)[m2]
    um = u[m2]
    pre = years <= C1975_YEAR
    h = state.hyper2

    def loglik(sigma0, a, b, S, c, phi):
        eps = um if phi is None else um - phi * prev
        mult = np.where(pre, c, 1.0)
        sd = np.maximum(mult * (sigma0 + (f0m - S) * np.where(f0m >= S, -a, b)), SD_FLOOR)
        return float(np.sum(norm_logpdf(eps, 0.0, sd)))

    params = ["sigma0", "a", "b", "S", "const_c"]
    bounds = {
        "sigma0": (state.sigma0_min, SIGMA0_MAX), "a": A_BOUNDS, "b": B_BOUNDS,
        "S": S_BOUNDS, "const_c": C_BOUNDS, "phi": PHI_BOUNDS,
    }
    if state.ar_phase2:
        params.append("phi")
    cur = {k: getattr(h, k) for k in ("sigma0", "a", "b", "S", "const_c")}
    cur["phi"] = h.phi if state.ar_phase2 else None
    lp = None
    for name in params:
        lo, hi = bounds[name]

        def logdens(x, name=name, lo=lo, hi=hi):
            if not lo < x < hi:
                return -math.inf
            kw = dict(cur)
            kw[name] = x
            return loglik(kw["sigma0"], kw["a"], kw["b"], kw["S"], kw["const_c"], kw["phi"])

        x, lp = slice_sample(cur[name], logdens, rng, SLICE_WIDTHS[name], lo, hi, logp0=lp)
        cur[name] = x
        setattr(h, name, x)


# ---------------------------------------------------------------------------
# Latent TFR


def _site_classes(n_t: int) -> list[np.ndarray]:
    # a cell touches transitions t-1, t, t+1; cells 3 apart never share one
    return [np.arange(r, n_t, 3) for r in range(3)]


def _meas_site_delta(state, f_new, changed):
    """Measurement log-density change attributed to the changed cell it references."""
    ms = state.meas
    out = np.zeros_like(f_new)
    if not len(ms):
        return out
    d = measurement_loglik(state, f_new) - measurement_loglik(state)
    lo_ch = changed[ms.country, ms.t_lo]
    hi_ch = changed[ms.country, ms.t_hi] & (ms.w_hi > 0)
    site = np.where(lo_ch, ms.t_lo, ms.t_hi)
    use = lo_ch | hi_ch
    np.add.at(out, (ms.country[use], site[use]), d[use])
    return out


def mh_latent_tfr(state: ModelState, rng, tuning: Tuning) -> None:
    n_c, n_t = state.tfr.shape
    lo, hi = TFR_BOUNDS
    pinned_site = np.zeros((n_c, n_t), dtype=bool)
    pr = np.flatnonzero(state.u_pinned)
    pinned_site[pr, state.tau[pr]] = True

    for cls in _site_classes(n_t):
        changed = np.zeros((n_c, n_t), dtype=bool)
        changed[:, cls] = True
        changed &= ~pinned_site
        if not changed.any():
            continue
        f = state.tfr
        scale = np.exp(tuning.log_scale["tfr"])
        prop_all, hast = truncnorm_propose(f, scale, lo, hi, rng)
        f_new = np.where(changed, prop_all, f)
        D = transition_logdens(state, f=f_new) - transition_logdens(state)
        Dp = np.pad(D, ((0, 0), (1, 2)))
        window = Dp[:, :n_t] + Dp[:, 1:n_t + 1] + Dp[:, 2:n_t + 2]
        log_ratio = window + _meas_site_delta(state, f_new, changed) + hast
        acc = metropolis_accept(log_ratio, rng) & changed
        state.tfr = np.where(acc, f_new, f)
        tuning.record("tfr", acc, mask=changed)

    if pr.size:
        # cells at tau also move U_c, so each country's full row is rescored
        f = state.tfr
        scale = np.exp(tuning.log_scale["tfr"])
        prop_all, hast = truncnorm_propose(f, scale, lo, hi, rng)
        f_new = np.where(pinned_site, prop_all, f)
        U_new = state.U.copy()
        U_new[pr] = f_new[pr, state.tau[pr]]
        row_d = (transition_logdens(state, f=f_new, U=U_new).sum(axis=1)
                 - transition_logdens(state).sum(axis=1))
        meas_d = _meas_site_delta(state, f_new, pinned_site).sum(axis=1)
        log_ratio = row_d + meas_d + hast[np.arange(n_c), np.maximum(state.tau, 0)]
        acc_c = metropolis_accept(log_ratio, rng) & state.u_pinned
        acc = pinned_site & acc_c[:, None]
        state.tfr = np.where(acc, f_new, f)
        state.U = np.where(acc_c, U_new, state.U)
        tuning.record("tfr", acc, mask=pinned_site)


def sample_phase2_sweep(state: ModelState, rng, tuning: Tuning) -> dict:
    """One full Phase II sweep; returns post-adaptation acceptance rates."""
    gibbs_phase2_hyper(state, rng)
    mh_country_params(state, rng, tuning)
    slice_phase2_hyper(state, rng)
    if state.uncertainty:
        mh_latent_tfr(state, rng, tuning)
    return {k: tuning.acceptance_rate(k) for k in tuning.proposed}
