"""Posterior TFR projections from stored chains."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import softmax

from .engine import (
    AR_FILE,
    LATENT_FILE,
    META_FILE,
    PHASE2_HYPER_FILES,
    STREAM_PREDICT,
    ChainStore,
    ConfigurationError,
    _rng,
    _write_meta,
    read_trace,
    verify_integrity,
)
from .phase2 import C1975_YEAR, SD_FLOOR, dl_decrement
from .phase3 import MU_C_BOUNDS, RHO_C_BOUNDS
from .samplers import truncnorm_draw
from .types import TimeGrid, TrajectorySet

MIN_TFR = 0.5
PHASE3_SWITCH_LEVEL = 2.0
DEFAULT_LEVELS = (0.025, 0.1, 0.9, 0.975)
PREDICTIONS_DIR = "predictions"


def selection_indices(total: int, n_traj: int) -> tuple[np.ndarray, int]:
    """Equally spaced positions into ``total`` pooled draws and their spacing."""
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    if n_traj > total:
        raise ValueError(f"{n_traj} trajectories requested but only {total} post-burn-in draws")
    thin = total // n_traj
    return np.arange(0, total, thin)[:n_traj], thin


def phase_switch_rule(f_prev, f_next, in_phase3):
    """Phase of the next step: Phase III once TFR rose while below 2.

    Phase III is absorbing.
    """
    f_prev, f_next = np.asarray(f_prev), np.asarray(f_next)
    return np.asarray(in_phase3) | ((f_next > f_prev) & (f_next < PHASE3_SWITCH_LEVEL))


def _pooled(store: ChainStore, name: str, burn_rows: int, country=None, phase3=False):
    parts = []
    for k in range(1, store.n_chains + 1):
        a = store.read(name, k, country, phase3=phase3)
        parts.append(a[burn_rows:])
    return np.concatenate(parts, axis=0)


def project_country(f_T, f_prev, theta, sigma, phi, mu, rho, sigma_eps, in_phase3, n_future,
                    years, rng, draw_phase3=None, carry=True):
    """Vectorised forward simulation for one country.

    Parameters are arrays over trajectories: ``theta`` holds ``D1, D3, d4, U,
    dc``; ``sigma`` holds ``sigma0, a, b, S, c``. ``phi`` is zero when the
    autoregressive Phase II term is off. ``draw_phase3(mask)`` returns
    ``(mu, rho)`` for trajectories that switch during the projection.
    """
    n = f_T.size
    D1, D3, d4, U, dc = theta
    sigma0, a, b, S, c = sigma
    out = np.empty((n, n_future))
    f = f_T.astype(float).copy()
    in3 = np.broadcast_to(in_phase3, (n,)).copy()
    mu, rho = np.array(mu, dtype=float, copy=True), np.array(rho, dtype=float, copy=True)

    # distortion of the last estimation period, from the two last latents
    u_prev = np.zeros(n)
    if carry and f_prev is not None:
        g_prev = dl_decrement(f_prev, D1, D3, d4, U, dc)
        u_prev = np.where(in3, 0.0, (f_prev - f_T) - g_prev)

    for t in range(n_future):
        z = rng.standard_normal(n)
        mult = np.where(years[t] <= C1975_YEAR, c, 1.0)
        sd = np.maximum(mult * (sigma0 + (f - S) * np.where(f >= S, -a, b)), SD_FLOOR)
        u = phi * u_prev + sd * z
        f2 = f - dl_decrement(f, D1, D3, d4, U, dc) - u
        f3 = mu + rho * (f - mu) + sigma_eps * z
        f_new = np.maximum(np.where(in3, f3, f2), MIN_TFR)
        switch = phase_switch_rule(f, f_new, in3) & ~in3
        if switch.any() and draw_phase3 is not None:
            m_new, r_new = draw_phase3(switch)
            mu = np.where(switch, m_new, mu)
            rho = np.where(switch, r_new, rho)
        in3 = in3 | switch
        u_prev = u
        f = f_new
        out[:, t] = f
    return out


def predict(store: ChainStore | str, end_year: int, burnin: int = 0, n_traj: int = 1000,
            uncertainty: Optional[bool] = None, seed: Optional[int] = None,
            countries: Optional[Iterable[int]] = None, write: bool = True) -> TrajectorySet:
    """Project every country to ``end_year`` from equally spaced posterior draws."""
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    unc = store.uncertainty if uncertainty is None else bool(uncertainty)
    if unc and not store.uncertainty:
        raise ConfigurationError("uncertainty projection needs latent tfr traces; the store has none")
    grid = store.grid
    if end_year <= grid.end_year:
        raise ValueError(f"end year {end_year} must follow the last estimation period {grid.end_year}")
    full = grid.extended(end_year)
    n_fut = full.n_periods - grid.n_periods
    fut_years = full.years[grid.n_periods - 1:-1]  # year of the step origin

    for k in range(1, store.n_chains + 1):
        verify_integrity(store, k)
        if not store.meta["one_step"]:
            verify_integrity(store, k, True)
    burn_rows = store.burnin_rows(burnin)
    rows = [store.n_rows(k) for k in range(1, store.n_chains + 1)]
    if any(r <= burn_rows for r in rows):
        raise ValueError(f"burnin of {burnin} iterations leaves no stored rows in some chain")
    total = sum(r - burn_rows for r in rows)
    idx, sel_thin = selection_indices(total, n_traj)

    hyp = {name: _pooled(store, name, burn_rows)[idx] for name in store.hyper_names()}
    hyp3 = {name: _pooled(store, name, burn_rows, phase3=True)[idx]
            for name in store.hyper_names(True)}
    phi = hyp[AR_FILE][:, 0] if store.ar_phase2 else np.zeros(n_traj)
    sigma = tuple(hyp[name][:, 0] for name in ("sigma0", "a_sd", "b_sd", "S_sd", "const_sd"))
    sigma_eps = hyp3["sigma.eps"][:, 0]
    ref = store.load_reference()
    rng = _rng(int(store.meta["seed"]) if seed is None else int(seed), STREAM_PREDICT)

    codes = store.countries if countries is None else [int(c) for c in countries]
    lam = dict(zip(store.countries, store.meta["lam"]))
    trajectories = {}
    for code in codes:
        if code not in lam:
            raise KeyError(f"country {code} not in store")
        gamma = _pooled(store, "gamma", burn_rows, code)[idx]
        d4 = _pooled(store, "Triangle_c4", burn_rows, code)[idx, 0]
        dc = _pooled(store, "d", burn_rows, code)[idx, 0]
        U = _pooled(store, "U", burn_rows, code)[idx, 0]
        D = softmax(gamma, axis=1) * (U - d4)[:, None]
        if unc:
            past = _pooled(store, LATENT_FILE, burn_rows, code)[idx]
        else:
            past = np.tile(ref[code].values, (n_traj, 1))
        in3 = lam[code] >= 0
        if in3:
            mu = _pooled(store, "mu.c", burn_rows, code, phase3=True)[idx, 0]
            rho = _pooled(store, "rho.c", burn_rows, code, phase3=True)[idx, 0]
        else:
            mu = np.full(n_traj, np.nan)
            rho = np.full(n_traj, np.nan)

        def draw_phase3(mask, hyp3=hyp3):
            m = truncnorm_draw(hyp3["mu"][:, 0], hyp3["sigma.mu"][:, 0], *MU_C_BOUNDS, rng)
            r = truncnorm_draw(hyp3["rho"][:, 0], hyp3["sigma.rho"][:, 0], *RHO_C_BOUNDS, rng)
            return m, r

        fut = project_country(
            past[:, -1], past[:, -2], (D[:, 0], D[:, 2], d4, U, dc), sigma, phi, mu, rho,
            sigma_eps, np.full(n_traj, in3), n_fut, fut_years, rng, draw_phase3,
        )
        trajectories[code] = np.hstack([past, fut])

    ts = TrajectorySet(full, grid.n_periods, trajectories, past_sampled=unc)
    if write:
        _write_predictions(store, ts, dict(end_year=end_year, burnin=burnin, n_traj=n_traj,
                                           thin=sel_thin, uncertainty=unc,
                                           seed=store.meta["seed"] if seed is None else seed))
        _write_thinned(store, burnin, burn_rows, idx, sel_thin)
    return ts


def _write_predictions(store: ChainStore, ts: TrajectorySet, info: dict):
    d = store.root / PREDICTIONS_DIR
    d.mkdir(exist_ok=True)
    years = ts.grid.years
    for code, traj in ts.trajectories.items():
        cols = [str(y) for y in years]
        df = pd.DataFrame(traj[:, ts.n_past:], columns=cols[ts.n_past:])
        df.to_csv(d / f"{code}.csv", index=False, float_format="%.10g")
        pd.DataFrame(traj[:, :ts.n_past], columns=cols[:ts.n_past]).to_csv(
            d / f"{code}_past.csv", index=False, float_format="%.10g")
        trajectory_table(ts, code).to_csv(d / f"{code}_summary.csv", float_format="%.10g")
    info = dict(info, countries=list(ts.trajectories), n_past=ts.n_past,
                grid={"start_year": ts.grid.start_year, "step": ts.grid.step,
                      "n_periods": ts.grid.n_periods})
    _write_meta(d / META_FILE, info)


def _write_thinned(store: ChainStore, burnin: int, burn_rows: int, idx, sel_thin: int):
    """Collapsed, thinned chain used for the projection (one mc1 per phase)."""
    root = store.root / f"thinned_mcmc_{sel_thin * store.thin}_{burnin}"
    for phase3 in (False, True):
        out = (root / "phaseIII" if phase3 else root) / "mc1"
        out.mkdir(parents=True, exist_ok=True)
        for path in store.trace_files(1, phase3):
            name = path.stem
            parts = [read_trace(store.chain_dir(k, phase3) / path.name)[burn_rows:]
                     for k in range(1, store.n_chains + 1)]
            np.savetxt(out / path.name, np.concatenate(parts)[idx], fmt="%.15g")
    meta = dict(store.meta, parent=str(store.root.resolve()), n_chains=1, burnin=0,
                thin=sel_thin * store.thin, source_burnin=burnin)
    _write_meta(root / META_FILE, meta)


def load_predictions(store: ChainStore | str) -> TrajectorySet:
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    d = store.root / PREDICTIONS_DIR
    if not (d / META_FILE).exists():
        raise FileNotFoundError(f"no predictions in {store.root}; run predict first")
    info = json.loads((d / META_FILE).read_text())
    g = info["grid"]
    grid = TimeGrid(g["start_year"], g["step"], g["n_periods"])
    traj = {}
    for code in info["countries"]:
        past = pd.read_csv(d / f"{code}_past.csv").to_numpy()
        fut = pd.read_csv(d / f"{code}.csv").to_numpy()
        traj[int(code)] = np.hstack([past, fut])
    return TrajectorySet(grid, info["n_past"], traj, past_sampled=info["uncertainty"])


def trajectory_table(ts: TrajectorySet, country: int,
                     levels: Sequence[float] = DEFAULT_LEVELS) -> pd.DataFrame:
    """Per-period median and quantiles plus the +-0.5 child scenario columns.

    Scenario columns are NA for estimation periods. Past periods appear only
    when they carry posterior draws.
    """
    if country not in ts.trajectories:
        raise KeyError(f"country {country} not in trajectory set")
    traj = ts.trajectories[country]
    years = ts.grid.years
    first = 0 if ts.past_sampled else ts.n_past - 1
    sub = traj[:, first:]
    q = np.quantile(sub, [0.5, *levels], axis=0)
    df = pd.DataFrame(q.T, index=pd.Index(years[first:], name="year"),
                      columns=["median"] + [f"{lv:g}" for lv in levels])
    future = np.arange(first, len(years)) >= ts.n_past
    df["-0.5child"] = np.where(future, df["median"] - 0.5, np.nan)
    df["+0.5child"] = np.where(future, df["median"] + 0.5, np.nan)
    return df
