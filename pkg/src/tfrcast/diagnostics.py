"""Convergence checks and posterior summaries over stored chains."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .engine import LATENT_FILE, ChainStore, ConfigurationError

PSRF_THRESHOLD = 1.1
LATENT_SHARE = 0.95
MIN_CHAINS = 2
MIN_DRAWS = 100
SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def psrf(chains) -> float:
    """Split-chain potential scale reduction factor.

    ``chains`` is ``(m, n)``; each chain is halved (a middle draw is dropped
    for odd ``n``) and the ratio of pooled to mean within-half variance is
    returned as ``sqrt(V / W)``. Returns NaN when every half is constant and
    equal, and ``inf`` when halves are constant but differ.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n = x.shape[1] // 2
    halves = np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)
    # test constancy exactly; var() of a constant can come out as 1e-33
    if np.all(np.ptp(halves, axis=1) == 0):
        return float("nan") if np.ptp(halves) == 0 else float("inf")
    w = halves.var(axis=1).mean()
    v = halves.var()
    return float(np.sqrt(v / w))


def is_converged(r: float, threshold: float = PSRF_THRESHOLD) -> bool:
    # zero-variance traces are trivially mixed
    return bool(np.isnan(r) or r < threshold)


def _row_thin(store: ChainStore, thin: int) -> int:
    return max(1, int(thin) // store.thin)


def _chains(store: ChainStore, name: str, country=None, phase3=False, burnin=0, thin=1):
    """Post-burn-in, thinned draws as a list of (rows, cols) arrays."""
    b = store.burnin_rows(burnin)
    step = _row_thin(store, thin)
    return [store.read(name, k, country, phase3=phase3)[b::step] for k in range(1, store.n_chains + 1)]


@dataclass
class Diagnosis:
    converged: bool
    report: pd.DataFrame
    latent_share: float

    def __str__(self):
        return "converged" if self.converged else "not converged"


def diagnose(store: ChainStore | str, thin: int = 1, burnin: int = 0,
             express: bool = False, write: bool = True) -> Diagnosis:
    """PSRF for every parameter and the overall verdict.

    Converged iff all hyperparameters converge, all non-latent country
    parameters converge (not checked when ``express``), and at least 95% of
    latent TFR cells converge.
    """
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    if store.n_chains < MIN_CHAINS:
        raise ConfigurationError(f"convergence diagnostics need at least {MIN_CHAINS} chains")
    n_draws = min(len(c) for c in _chains(store, store.hyper_names()[0], burnin=burnin, thin=thin))
    if n_draws < MIN_DRAWS:
        raise ConfigurationError(
            f"chains too short for diagnostics: {n_draws} post-burn-in draws per chain, "
            f"at least {MIN_DRAWS} required")

    rows = []

    def add(kind, name, country, arrays, labels):
        stacked = np.stack(arrays)  # (m, n, cols)
        for j in range(stacked.shape[2]):
            r = psrf(stacked[:, :, j])
            rows.append((kind, name, country, labels[j], r, is_converged(r)))

    phases = [False, True]
    for phase3 in phases:
        for name in store.hyper_names(phase3):
            a = _chains(store, name, phase3=phase3, burnin=burnin, thin=thin)
            add("hyper", name, None, a, [str(j + 1) for j in range(a[0].shape[1])])
    years = store.grid.years
    for phase3 in phases:
        codes = store.phase3_countries if phase3 else store.countries
        for name in store.country_names(phase3):
            latent = name == LATENT_FILE
            if express and not latent:
                continue
            for code in codes:
                a = _chains(store, name, code, phase3=phase3, burnin=burnin, thin=thin)
                labels = [str(y) for y in years] if latent else [str(j + 1) for j in range(a[0].shape[1])]
                add("latent" if latent else "country", name, code, a, labels)

    report = pd.DataFrame(rows, columns=["kind", "parameter", "country", "index", "psrf", "converged"])
    hyper_ok = report.loc[report.kind == "hyper", "converged"].all()
    country_ok = report.loc[report.kind == "country", "converged"].all()
    lat = report.loc[report.kind == "latent", "converged"]
    share = float(lat.mean()) if len(lat) else 1.0
    verdict = bool(hyper_ok and country_ok and share >= LATENT_SHARE)
    diag = Diagnosis(verdict, report, share)
    if write:
        d = store.root / "diagnostics"
        d.mkdir(exist_ok=True)
        with open(d / f"{thin}_{burnin}.txt", "w") as fh:
            fh.write(f"# verdict: {diag}\n# rule: split-chain PSRF < {PSRF_THRESHOLD}; "
                     f"latent tfr share converged {share:.4f} (needs >= {LATENT_SHARE})\n"
                     f"# express: {express}\n")
            report.to_csv(fh, index=False)
    return diag


def integrated_autocorr_time(x) -> float:
    """Geyer initial positive sequence estimate of the integrated
    autocorrelation time of one chain."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    var = xc @ xc / n
    if n < 4 or var == 0:
        return 1.0
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    rho = acov / var
    pairs = rho[: (n // 2) * 2].reshape(-1, 2).sum(axis=1)
    pos = np.flatnonzero(pairs <= 0)
    k = pos[0] if pos.size else pairs.size
    return float(max(1.0, -1.0 + 2.0 * pairs[:k].sum()))


def summarize_draws(chains: Sequence[np.ndarray], label: str) -> dict:
    allx = np.concatenate([np.asarray(c, float) for c in chains])
    n = allx.size
    const = np.ptp(allx) == 0
    sd = float(allx.std(ddof=1)) if n > 1 and not const else 0.0
    mean = float(allx[0]) if const else float(allx.mean())
    taus = [integrated_autocorr_time(c) for c in chains if len(c) > 0]
    tau = float(np.mean(taus)) if taus else 1.0
    q = np.quantile(allx, SUMMARY_QUANTILES)
    out = {"parameter": label, "Mean": mean, "SD": sd,
           "Naive SE": sd / np.sqrt(n), "Time-series SE": sd * np.sqrt(tau / n)}
    for lv, v in zip(SUMMARY_QUANTILES, q):
        out[f"{100 * lv:g}%"] = float(v)
    return out


def valid_parameter_names(store: ChainStore, country: bool) -> list[str]:
    if country:
        return store.country_names(False) + store.country_names(True)
    return store.hyper_names(False) + store.hyper_names(True)


def summarize(store: ChainStore | str, names: Optional[Iterable[str]] = None,
              country: Optional[int] = None, thin: int = 1, burnin: int = 0) -> pd.DataFrame:
    """Mean, SD, naive and time-series SE and quantiles per parameter."""
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    valid = valid_parameter_names(store, country is not None)
    names = list(valid if names is None else names)
    bad = [n for n in names if n not in valid]
    if bad:
        raise ValueError(f"unknown parameter(s) {bad}; valid names: {', '.join(valid)}")
    if country is not None and country not in store.countries:
        raise KeyError(f"country {country} not in store")
    rows = []
    for name in names:
        phase3 = name in store.hyper_names(True) or name in store.country_names(True)
        if country is not None and phase3 and country not in store.phase3_countries:
            continue
        a = _chains(store, name, country, phase3=phase3, burnin=burnin, thin=thin)
        cols = a[0].shape[1]
        for j in range(cols):
            if name == LATENT_FILE:
                label = f"{name}_{store.grid.years[j]}"
            else:
                label = name if cols == 1 else f"{name}[{j + 1}]"
            rows.append(summarize_draws([c[:, j] for c in a], label))
    return pd.DataFrame(rows).set_index("parameter")


def estimation_quantiles(store: ChainStore | str, country: int,
                         levels: Optional[Sequence[float]] = None, thin: int = 1,
                         burnin: int = 0):
    """Pooled latent TFR draws of one country and optional per-period quantiles.

    Returns ``(matrix, table)``; ``table`` is None when ``levels`` is None.
    """
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    if not store.uncertainty:
        raise ConfigurationError("estimation quantiles need a store run with uncertainty")
    if country not in store.countries:
        raise KeyError(f"country {country} not in store")
    mat = np.concatenate(_chains(store, LATENT_FILE, country, burnin=burnin, thin=thin))
    table = None
    if levels is not None:
        q = np.quantile(mat, list(levels), axis=0)
        table = pd.DataFrame(q.T, index=pd.Index(store.grid.years, name="year"),
                             columns=[f"{lv:g}" for lv in levels])
    return mat, table
