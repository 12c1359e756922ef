"""Reading raw-observation and reference CSV files and aligning them in time."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .types import RawObservation, ReferenceSeries, TimeGrid

REQUIRED_COLUMNS = ("country_code", "year", "tfr")
UNKNOWN_LEVEL = "unknown"


class DataFormatError(ValueError):
    """Input file is malformed (missing columns, unparsable values)."""


@dataclass
class RawDataset:
    """Raw TFR observations with their data-quality covariates.

    Held as a DataFrame with columns ``country_code``, ``year``, ``tfr`` and
    one column per covariate; categorical covariates are strings.
    """

    frame: pd.DataFrame
    covariate_names: list = field(default_factory=list)
    cont_covariate_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)

    @property
    def observations(self) -> list[RawObservation]:
        names = list(self.covariate_names) + list(self.cont_covariate_names)
        return [
            RawObservation(int(r.country_code), float(r.year), float(r.tfr),
                           {k: getattr(r, k) for k in names})
            for r in self.frame.itertuples(index=False)
        ]

    def for_country(self, code: int) -> "RawDataset":
        sub = self.frame[self.frame["country_code"] == code].reset_index(drop=True)
        return RawDataset(sub, list(self.covariate_names), list(self.cont_covariate_names))

    @property
    def countries(self) -> np.ndarray:
        return np.unique(self.frame["country_code"].to_numpy(dtype=int))


def load_raw(path, covariates: Sequence[str] = ("source", "method"),
             cont_covariates: Sequence[str] = ()) -> RawDataset:
    """Parse a raw TFR CSV.

    Missing categorical values become ``"unknown"``; years stay decimal.
    """
    covariates = list(covariates)
    cont_covariates = list(cont_covariates)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError(f"{path}: file is empty") from exc
    df.columns = [c.strip() for c in df.columns]
    for col in list(REQUIRED_COLUMNS) + covariates + cont_covariates:
        if col not in df.columns:
            raise DataFormatError(f"{path}: missing required column '{col}'")

    out = pd.DataFrame()
    out["country_code"] = _parse_numeric(df, "country_code", path, integer=True)
    out["year"] = _parse_numeric(df, "year", path)
    out["tfr"] = _parse_numeric(df, "tfr", path)
    for col in covariates:
        vals = df[col].astype(str).str.strip()
        out[col] = vals.where(vals != "", UNKNOWN_LEVEL)
    for col in cont_covariates:
        out[col] = _parse_numeric(df, col, path)

    bad = np.flatnonzero(~(out["tfr"].to_numpy() > 0))
    if bad.size:
        raise DataFormatError(f"{path}: line {bad[0] + 2}: tfr must be positive")
    yr = out["year"].to_numpy()
    bad = np.flatnonzero((yr < 1900) | (yr > 2100))
    if bad.size:
        raise DataFormatError(f"{path}: line {bad[0] + 2}: year outside [1900, 2100]")
    return RawDataset(out, covariates, cont_covariates)


def _to_float(text):
    try:
        return float(text)
    except ValueError:
        return np.nan


def _parse_numeric(df, col, path, integer=False):
    raw = df[col].astype(str).str.strip()
    # pandas' own string parser is not round-trip exact; use Python's float
    vals = pd.Series([_to_float(v) for v in raw], index=raw.index, dtype=float)
    bad = np.flatnonzero(vals.isna().to_numpy())
    if bad.size:
        i = bad[0]
        # header is line 1
        raise DataFormatError(f"{path}: line {i + 2}: non-numeric {col} value {raw.iloc[i]!r}")
    if integer:
        if np.any(vals != np.round(vals)):
            i = int(np.flatnonzero(vals != np.round(vals))[0])
            raise DataFormatError(f"{path}: line {i + 2}: {col} must be an integer")
        return vals.astype(int)
    return vals.astype(float)


def write_raw(raw: RawDataset, path) -> None:
    raw.frame.to_csv(path, index=False, float_format="%.17g")


def raw_from_frame(frame: pd.DataFrame, covariates=(), cont_covariates=()) -> RawDataset:
    frame = frame.reset_index(drop=True).copy()
    for col in covariates:
        frame[col] = frame[col].astype(str)
    return RawDataset(frame, list(covariates), list(cont_covariates))


def load_reference(path, start_year: int | None = None,
                   present_year: int | None = None) -> dict[int, ReferenceSeries]:
    """Parse a wide reference CSV (``country_code`` then one column per period)."""
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError(f"{path}: file is empty") from exc
    df.columns = [c.strip() for c in df.columns]
    if "country_code" not in df.columns:
        raise DataFormatError(f"{path}: missing required column 'country_code'")
    try:
        years = [int(float(c)) for c in df.columns if c != "country_code"]
    except ValueError as exc:
        raise DataFormatError(f"{path}: period columns must be labelled by year") from exc
    if len(years) < 3:
        raise DataFormatError(f"{path}: need at least 3 period columns")
    steps = set(np.diff(years).tolist())
    if len(steps) != 1 or steps.pop() not in (1, 5):
        raise DataFormatError(f"{path}: period columns must be consecutive with step 1 or 5")
    step = years[1] - years[0]

    codes = _parse_numeric(df, "country_code", path, integer=True).to_numpy()
    ycols = [c for c in df.columns if c != "country_code"]
    values = np.empty((len(df), len(ycols)))
    for j, c in enumerate(ycols):
        values[:, j] = _parse_numeric(df, c, path).to_numpy()

    years = np.array(years)
    keep = np.ones(len(years), dtype=bool)
    if start_year is not None:
        keep &= years >= start_year
    if present_year is not None:
        keep &= years <= present_year
    years, values = years[keep], values[:, keep]
    grid = TimeGrid(int(years[0]), step, len(years))
    out = {}
    for code, row in zip(codes, values):
        if int(code) in out:
            raise DataFormatError(f"{path}: duplicate country_code {code}")
        out[int(code)] = ReferenceSeries(int(code), grid, row)
    return out


def write_reference(reference: dict[int, ReferenceSeries], path) -> None:
    series = list(reference.values())
    grid = series[0].grid
    df = pd.DataFrame([s.values for s in series], columns=[str(y) for y in grid.years])
    df.insert(0, "country_code", [s.country for s in series])
    df.to_csv(path, index=False, float_format="%.17g")


def align_year(year: float) -> int:
    """Calendar year an observation is attributed to on an annual grid."""
    return int(math.floor(year))


def interpolate_reference(series: ReferenceSeries, target: TimeGrid) -> ReferenceSeries:
    """Linearly interpolate a five-year series onto an annual grid."""
    src = series.grid
    if src.step != 5 or target.step != 1:
        raise ValueError("interpolation maps a five-year series onto an annual grid")
    if target.start_year < src.start_year or target.end_year > src.end_year:
        raise ValueError(
            f"target span {target.start_year}-{target.end_year} outside source span "
            f"{src.start_year}-{src.end_year}"
        )
    t = target.years.astype(float)
    lo = np.minimum((t - src.start_year) // 5, src.n_periods - 2).astype(int)
    t_lo = src.start_year + 5.0 * lo
    f = series.values
    w = (t - t_lo) / 5
    # anchor years and constant stretches come out exact
    vals = np.where(w == 1, f[lo + 1], f[lo] + w * (f[lo + 1] - f[lo]))
    return ReferenceSeries(series.country, target, vals)


def reference_value_at(series: ReferenceSeries, year: float) -> float:
    """Reference TFR at an arbitrary (decimal) year: floor on annual grids,
    linear interpolation between anchors on five-year grids."""
    g = series.grid
    if g.step == 1:
        return float(series.values[align_year(year) - g.start_year])
    pos = (year - g.start_year) / 5.0
    lo = min(int(math.floor(pos)), g.n_periods - 2)
    w = pos - lo
    return float((1 - w) * series.values[lo] + w * series.values[lo + 1])


@dataclass
class AttachedObservations:
    """Observations linked to latent grid cells.

    Each observation references a lower and upper period with linear weights;
    on annual grids ``t_hi == t_lo`` and ``w_hi == 0``.
    """

    row: np.ndarray  # position in the original RawDataset frame
    country: np.ndarray  # country code
    t_lo: np.ndarray
    t_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    y: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.y)

    def by_cell(self) -> dict:
        """Map (country, period) to observation positions weighting that period."""
        cells: dict = {}
        for j in range(len(self.y)):
            cells.setdefault((int(self.country[j]), int(self.t_lo[j])), []).append(j)
            if self.w_hi[j] > 0 and self.t_hi[j] != self.t_lo[j]:
                cells.setdefault((int(self.country[j]), int(self.t_hi[j])), []).append(j)
        return cells


def attach_observations(raw: RawDataset, grid: TimeGrid,
                        countries: Iterable[int] | None = None) -> AttachedObservations:
    """Link every in-range observation to its grid period(s); count the rest."""
    fr = raw.frame
    codes = fr["country_code"].to_numpy(dtype=int)
    years = fr["year"].to_numpy(dtype=float)
    y = fr["tfr"].to_numpy(dtype=float)
    keep = np.ones(len(fr), dtype=bool)
    if countries is not None:
        keep &= np.isin(codes, np.asarray(list(countries), dtype=int))

    if grid.step == 1:
        t_lo = np.floor(years).astype(int) - grid.start_year
        in_range = (t_lo >= 0) & (t_lo < grid.n_periods)
        t_hi = t_lo.copy()
        w_lo = np.ones(len(fr))
        w_hi = np.zeros(len(fr))
    else:
        pos = (years - grid.start_year) / 5.0
        in_range = (pos >= 0) & (pos <= grid.n_periods - 1)
        t_lo = np.floor(pos).astype(int)
        at_end = t_lo == grid.n_periods - 1
        t_hi = np.where(at_end, t_lo, t_lo + 1)
        # weights follow the interpolation formula (t_{l+5} - t)/5 and (t - t_l)/5
        t_lo_year = grid.start_year + 5.0 * t_lo
        w_hi = np.where(at_end, 0.0, (years - t_lo_year) / 5.0)
        w_lo = np.where(at_end, 1.0, (t_lo_year + 5.0 - years) / 5.0)

    dropped = int(np.sum(keep & ~in_range))
    if dropped:
        warnings.warn(f"{dropped} observation(s) outside {grid.start_year}-{grid.end_year} dropped",
                      stacklevel=2)
    sel = np.flatnonzero(keep & in_range)
    return AttachedObservations(
        row=sel, country=codes[sel], t_lo=t_lo[sel], t_hi=t_hi[sel],
        w_lo=w_lo[sel], w_hi=w_hi[sel], y=y[sel], dropped=dropped,
    )
