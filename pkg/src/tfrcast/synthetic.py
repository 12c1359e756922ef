"""Simulated worlds drawn from the full model, for calibration checks and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .ingest import RawDataset, raw_from_frame
from .measurement import UNBIASED_VR_SD
from .phase2 import distortion_sd, dl_decrement
from .phases import phase_markers
from .types import (
    ModelState,
    Phase2Hyper,
    Phase3Hyper,
    ReferenceSeries,
    TimeGrid,
    dc_from_star,
    delta4_from_prime,
)

#: Survey-type sources of simulated observations: (name, bias, sd, every k years)
SURVEY_SOURCES = (("DHS", 0.15, 0.15, 3), ("Census", -0.2, 0.2, 5), ("Estimate", 0.0, 0.12, 2))

VR_CODES = (36, 124, 250, 276, 392, 528, 752, 756, 826, 840)
OTHER_CODES = (4, 50, 120, 180, 231, 288, 404, 454, 566, 800, 834, 894)


def default_world_hyper() -> tuple[Phase2Hyper, Phase3Hyper]:
    """Known annual-scale hyperparameters used to generate test worlds."""
    h2 = Phase2Hyper(
        chi=-1.2, psi=0.3, Delta4=-0.8, delta4=0.4,
        alpha=np.array([-1.0, 0.5, 1.5]), delta=np.array([0.3, 0.3, 0.3]),
        sigma0=0.06, a=0.005, b=0.008, S=5.0, const_c=1.0,
        m_tau=0.0, s_tau=0.1, phi=0.7,
    )
    h3 = Phase3Hyper(mu_bar=1.9, sigma_mu=0.1, rho_bar=0.8, sigma_rho=0.08, sigma_eps=0.04)
    return h2, h3


@dataclass
class SyntheticWorld:
    raw: RawDataset
    reference: dict
    truth: ModelState
    vr_countries: tuple


def _phase2_path(f0, n, U, D1, D3, d4, dc, years, h2, phi, rng, start_u=None):
    """Phase II trajectory of length ``n`` from ``f0``; ``start_u`` is the
    start-period distortion (drawn from N(m_tau, s_tau) by the caller)."""
    f = np.empty(n)
    f[0] = f0
    u_prev = None
    for t in range(n - 1):
        g = dl_decrement(f[t], D1, D3, d4, U, dc)
        sd = distortion_sd(f[t], years[t], h2)
        if u_prev is None:
            u = start_u if start_u is not None else sd * rng.standard_normal()
        else:
            u = phi * u_prev + sd * rng.standard_normal()
        f[t + 1] = f[t] - g - u
        u_prev = u
    return f


def _one_country(kind, n, years, h2, h3, phi, rng, annual):
    gamma = h2.alpha + h2.delta * rng.standard_normal(3)
    d4p = h2.Delta4 + h2.delta4 * rng.standard_normal()
    dstar = h2.chi + h2.psi * rng.standard_normal()
    d4 = float(delta4_from_prime(d4p))
    dc = float(dc_from_star(dstar, annual))
    p = np.exp(gamma - gamma.max())
    p /= p.sum()

    if kind == 0:
        # Phase I random walk, then the transition starts from the peak
        tau = int(rng.integers(3, 9))
        f = np.empty(n)
        f[0] = rng.uniform(6.3, 7.3)
        for t in range(tau):
            f[t + 1] = f[t] + h2.s_tau * rng.standard_normal()
        U = f[tau]
        D = p * (U - d4)
        start_u = h2.m_tau + h2.s_tau * rng.standard_normal()
        f[tau:] = _phase2_path(f[tau], n - tau, U, D[0], D[2], d4, dc, years[tau:], h2, phi,
                               rng, start_u)
    else:
        tau = -1
        u_lower = 5.5
        U = rng.uniform(u_lower, 8.8)
        D = p * (U - d4)
        f0 = rng.uniform(4.0, 5.5) if kind == 1 else rng.uniform(1.9, 2.5)
        f = _phase2_path(f0, n, U, D[0], D[2], d4, dc, years, h2, phi, rng)

    mu = rho = np.nan
    lam = phase_markers(f, annual).lam
    if lam < 0 and kind == 2:
        # late transitions are switched to Phase III at a block start
        step = 5 if annual else 1
        lam = step * int(rng.integers(2, 5))
    if lam >= 0:
        # regenerate everything after lambda from the Phase III AR(1)
        mu = h3.mu_bar + h3.sigma_mu * rng.standard_normal()
        rho = h3.rho_bar + h3.sigma_rho * rng.standard_normal()
        if not (0 < rho < 1 and mu > 0):
            return None
        for t in range(lam, n - 1):
            f[t + 1] = mu + rho * (f[t] - mu) + h3.sigma_eps * rng.standard_normal()
    if np.any(f < 0.8) or np.any(f > 9.0) or not np.all(np.isfinite(f)):
        return None
    m = phase_markers(f, annual)
    if m.tau != tau or m.lam != lam:
        return None
    if tau < 0 and f.max() > U:
        return None
    return dict(gamma=gamma, d4p=d4p, dstar=dstar, U=U, tau=tau, lam=lam, mu=mu, rho=rho, f=f)


def simulate_world(n_countries: int = 10, n_periods: int = 40, start_year: int = 1980,
                   phi: float = 0.7, seed: int = 0, n_vr: int = 4,
                   hyper2: Phase2Hyper | None = None, hyper3: Phase3Hyper | None = None,
                   annual: bool = True, max_tries: int = 2000) -> SyntheticWorld:
    """Draw country parameters from the hierarchical priors at known
    hyperparameters, simulate latent TFR and noisy multi-source observations.

    Country kinds cycle through (Phase I start, mid transition, late
    transition); paths whose detected phase markers differ from the
    generating ones are redrawn. The reference series is the true path.
    """
    rng = np.random.default_rng(seed)
    h2d, h3d = default_world_hyper()
    h2 = hyper2 if hyper2 is not None else h2d
    h3 = hyper3 if hyper3 is not None else h3d
    h2.phi = phi if annual else None
    grid = TimeGrid(start_year, 1 if annual else 5, n_periods)
    years = grid.years
    n_vr = min(n_vr, n_countries, len(VR_CODES))
    codes = list(VR_CODES[:n_vr]) + list(OTHER_CODES[:n_countries - n_vr])
    if len(codes) < n_countries:
        codes += [1000 + i for i in range(n_countries - len(codes))]

    draws = []
    for i in range(n_countries):
        kind = i % 3
        for _ in range(max_tries):
            d = _one_country(kind, n_periods, years, h2, h3, phi if annual else 0.0, rng, annual)
            if d is not None:
                break
        else:
            raise RuntimeError(f"could not simulate a consistent path for country kind {kind}")
        draws.append(d)

    tfr = np.vstack([d["f"] for d in draws])
    tau = np.array([d["tau"] for d in draws])
    lam = np.array([d["lam"] for d in draws])
    truth = ModelState(
        countries=np.array(codes), grid=grid, hyper2=h2, hyper3=h3,
        gamma=np.vstack([d["gamma"] for d in draws]),
        delta4_prime=np.array([d["d4p"] for d in draws]),
        dc_star=np.array([d["dstar"] for d in draws]),
        U=np.array([d["U"] for d in draws]),
        mu_c=np.array([d["mu"] for d in draws]), rho_c=np.array([d["rho"] for d in draws]),
        tau=tau, lam=lam, tfr=tfr, u_lower=np.minimum(5.5, tfr.max(axis=1)),
        annual=annual, ar_phase2=annual, uncertainty=True,
        sigma0_min=0.04 if annual else 0.01,
    )

    rows = []
    for i, code in enumerate(codes):
        if i < n_vr:
            y = tfr[i] + UNBIASED_VR_SD * rng.standard_normal(n_periods)
            rows += [(code, yr + 0.5, v, "VR", "Direct") for yr, v in zip(years, y)]
        for name, bias, sd, every in SURVEY_SOURCES:
            off = int(rng.integers(0, every))
            for t in range(off, n_periods, every):
                v = tfr[i, t] + bias + sd * rng.standard_normal()
                rows.append((code, years[t] + 0.5, max(v, 0.3), name,
                             "Indirect" if name == "Census" else "Direct"))
    frame = pd.DataFrame(rows, columns=["country_code", "year", "tfr", "source", "method"])
    raw = raw_from_frame(frame, covariates=("source",))
    reference = {c: ReferenceSeries(c, grid, tfr[i]) for i, c in enumerate(codes)}
    return SyntheticWorld(raw, reference, truth, tuple(codes[:n_vr]))
