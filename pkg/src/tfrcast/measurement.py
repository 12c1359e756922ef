"""Per-country bias and standard deviation of raw TFR observations.

Both quantities are linear in the data-quality covariates. The bias model is
ordinary least squares of the residual (raw minus reference TFR) on an
intercept, dummy-coded categorical covariates and raw continuous covariates.
The sd model regresses the absolute centred residual on the same design and
rescales by sqrt(pi/2), which turns a mean absolute deviation into a normal
standard deviation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .ingest import RawDataset, attach_observations, reference_value_at
from .types import MeasurementParams, ReferenceSeries, TimeGrid

MIN_SD = 0.1
UNBIASED_VR_SD = 0.0161
MAD_TO_SD = math.sqrt(math.pi / 2)
VR_LEVEL = "VR"

#: Countries whose vital registration is treated as unbiased in production
#: runs (most of Europe, Australia, Japan, Korea, New Zealand, USA).
UNBIASED_VR_COUNTRIES = (
    36, 40, 56, 124, 203, 208, 246, 250, 276, 300, 352, 372, 380, 392,
    410, 428, 442, 528, 554, 578, 620, 724, 752, 756, 792, 826, 840,
)


@dataclass
class BiasSdFit:
    """Fitted bias/sd for one country.

    ``bias`` and ``sd`` are aligned with ``rows`` (positions in the raw
    frame). ``table`` has one row per unique covariate combination.
    """

    country: int
    rows: np.ndarray
    residuals: np.ndarray
    bias: np.ndarray
    sd: np.ndarray
    sd_fitted: np.ndarray
    beta: pd.Series
    gamma: pd.Series
    table: pd.DataFrame


def design_matrix(frame: pd.DataFrame, covariates: Iterable[str],
                  cont_covariates: Iterable[str] = ()) -> pd.DataFrame:
    """Intercept + treatment-coded categoricals (alphabetical baseline) +
    continuous covariates."""
    cols = {"(Intercept)": np.ones(len(frame))}
    for cov in covariates:
        levels = sorted(set(frame[cov].astype(str)))
        for lev in levels[1:]:
            cols[f"{cov}{lev}"] = (frame[cov].astype(str) == lev).to_numpy(dtype=float)
    for cov in cont_covariates:
        cols[cov] = frame[cov].to_numpy(dtype=float)
    return pd.DataFrame(cols, index=frame.index)


def drop_aliased(X: pd.DataFrame, tol: float = 1e-10) -> tuple[pd.DataFrame, list[str]]:
    """Keep columns left to right while they add rank; return dropped names."""
    kept, dropped = [], []
    rank = 0
    for name in X.columns:
        cand = X[kept + [name]].to_numpy()
        r = np.linalg.matrix_rank(cand, tol=tol * max(1.0, np.abs(cand).max())) if cand.size else 0
        if r > rank:
            kept.append(name)
            rank = r
        else:
            dropped.append(name)
    return X[kept], dropped


def _lstsq(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def fit_bias_sd(raw: RawDataset, reference: Mapping[int, ReferenceSeries] | ReferenceSeries,
                country: int, unbiased_vr: Iterable[int] = (),
                source_column: str = "source") -> BiasSdFit:
    """Fit the bias and sd models for one country, then apply the sd floor
    ``max(0.1, |bias|/2)`` and the unbiased-VR override."""
    series = reference if isinstance(reference, ReferenceSeries) else reference[country]
    sub = raw.frame[raw.frame["country_code"] == country]
    g = series.grid
    years = sub["year"].to_numpy(dtype=float)
    lo, hi = g.start_year, g.end_year + (1 if g.step == 1 else 0)
    inside = (years >= lo) & ((years < hi) if g.step == 1 else (years <= hi))
    if np.any(~inside):
        warnings.warn(f"country {country}: {int(np.sum(~inside))} observation(s) outside the "
                      "reference span ignored in the bias/sd fit", stacklevel=2)
    sub = sub[inside]
    covs = [c for c in raw.covariate_names]
    conts = [c for c in raw.cont_covariate_names]
    if len(sub) == 0:
        warnings.warn(f"country {country}: no observations, empty bias/sd fit", stacklevel=2)
        empty = np.zeros(0)
        return BiasSdFit(country, np.zeros(0, dtype=int), empty, empty, empty, empty,
                         pd.Series(dtype=float), pd.Series(dtype=float),
                         pd.DataFrame(columns=covs + conts + ["bias", "sd"]))

    fhat = np.array([reference_value_at(series, yr) for yr in sub["year"]])
    resid = sub["tfr"].to_numpy(dtype=float) - fhat

    X, dropped = drop_aliased(design_matrix(sub, covs, conts))
    if dropped:
        warnings.warn(f"country {country}: aliased design columns dropped: {dropped}", stacklevel=2)
    Xa = X.to_numpy()
    beta = _lstsq(Xa, resid)
    bias = Xa @ beta
    gamma = _lstsq(Xa, np.abs(resid - bias))
    sd_fit = (Xa @ gamma) * MAD_TO_SD
    sd = np.maximum(sd_fit, np.maximum(MIN_SD, np.abs(bias) / 2))

    if country in set(int(c) for c in unbiased_vr) and source_column in sub.columns:
        vr = (sub[source_column].astype(str) == VR_LEVEL).to_numpy()
        bias = np.where(vr, 0.0, bias)
        sd = np.where(vr, UNBIASED_VR_SD, sd)

    table = sub[covs + conts].copy()
    table["bias"] = bias
    table["sd"] = sd
    table = table.drop_duplicates(subset=covs + conts).reset_index(drop=True)
    return BiasSdFit(
        country=country, rows=sub.index.to_numpy(), residuals=resid, bias=bias, sd=sd,
        sd_fitted=sd_fit, beta=pd.Series(beta, index=X.columns),
        gamma=pd.Series(gamma * MAD_TO_SD, index=X.columns), table=table,
    )


def predict_bias(coefs: pd.Series, combos: pd.DataFrame, covariates: Iterable[str],
                 levels: Mapping[str, Iterable[str]] | None = None) -> np.ndarray:
    """Evaluate a fitted linear model at covariate combinations.

    ``levels`` gives the full level set per covariate so that the dummy
    coding matches the fit even when ``combos`` has fewer levels.
    """
    covariates = list(covariates)
    X = pd.DataFrame({"(Intercept)": np.ones(len(combos))}, index=combos.index)
    for cov in covariates:
        levs = sorted(levels[cov]) if levels else sorted(set(combos[cov]))
        for lev in levs[1:]:
            X[f"{cov}{lev}"] = (combos[cov].astype(str) == lev).astype(float)
    cols = [c for c in coefs.index if c in X.columns]
    return X[cols].to_numpy() @ coefs[cols].to_numpy()


def measurement_for_countries(raw: RawDataset, reference: Mapping[int, ReferenceSeries],
                              grid: TimeGrid, countries, unbiased_vr: Iterable[int] = (),
                              source_column: str = "source"):
    """Fit bias/sd for every country and link observations to the latent grid.

    Returns ``(MeasurementParams, {code: BiasSdFit})`` with
    ``MeasurementParams.country`` holding row positions in ``countries``.
    """
    countries = [int(c) for c in countries]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        att = attach_observations(raw, grid, countries)
    pos = {c: i for i, c in enumerate(countries)}
    fits = {}
    bias = np.full(len(raw.frame), np.nan)
    sd = np.full(len(raw.frame), np.nan)
    for code in countries:
        if not np.any(att.country == code):
            continue
        fit = fit_bias_sd(raw, reference, code, unbiased_vr, source_column)
        fits[code] = fit
        bias[fit.rows] = fit.bias
        sd[fit.rows] = fit.sd
    b, s = bias[att.row], sd[att.row]
    ok = np.isfinite(b) & np.isfinite(s)
    meas = MeasurementParams(
        country=np.array([pos[c] for c in att.country[ok]], dtype=int),
        t_lo=att.t_lo[ok], t_hi=att.t_hi[ok], w_lo=att.w_lo[ok], w_hi=att.w_hi[ok],
        y=att.y[ok], bias=b[ok], sd=s[ok],
    )
    return meas, fits
