"""Domain types shared by the estimation, projection and reporting code.

Country-level parameters are held in vectorised form inside :class:`ModelState`
(one array entry per country) so that sweeps can update all countries at
once. :class:`Phase2CountryParams` is the per-country view with both the raw
double-logistic parameters and their unconstrained transforms.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

#: Country-level bounds of the maximum decrement d_c.
DC_BOUNDS_FIVE_YEAR = (0.25, 2.5)
DC_BOUNDS_ANNUAL = (0.05, 0.5)
#: Bounds of the lower asymptote Delta_c4.
DELTA4_BOUNDS = (1.0, 2.5)
#: Upper bound of the uniform prior on the Phase II start level U_c.
U_UPPER = 8.8
#: Latent TFR support used by the sampler.
TFR_BOUNDS = (0.0, 20.0)

BEFORE_START = -1
NOT_REACHED = -1


def dc_bounds(annual: bool) -> tuple[float, float]:
    return DC_BOUNDS_ANNUAL if annual else DC_BOUNDS_FIVE_YEAR


def logit_bounded(x, lo, hi):
    """Map ``x`` in ``(lo, hi)`` to the real line: ``log((x - lo) / (hi - x))``."""
    x = np.asarray(x, dtype=float)
    return np.log((x - lo) / (hi - x))


def expit_bounded(y, lo, hi):
    """Inverse of :func:`logit_bounded`."""
    return lo + (hi - lo) * expit(y)


def dc_from_star(dc_star, annual: bool):
    lo, hi = dc_bounds(annual)
    return expit_bounded(dc_star, lo, hi)


def dc_to_star(dc, annual: bool):
    lo, hi = dc_bounds(annual)
    return logit_bounded(dc, lo, hi)


def delta4_from_prime(delta4_prime):
    return expit_bounded(delta4_prime, *DELTA4_BOUNDS)


def delta4_to_prime(delta4):
    return logit_bounded(delta4, *DELTA4_BOUNDS)


@dataclass(frozen=True)
class TimeGrid:
    """Regular grid of estimation periods labelled by their start year."""

    start_year: int
    step: int
    n_periods: int

    def __post_init__(self):
        if self.step not in (1, 5):
            raise ValueError(f"time step must be 1 or 5, got {self.step}")
        if self.n_periods < 3:
            raise ValueError(f"a time grid needs at least 3 periods, got {self.n_periods}")

    @property
    def years(self) -> np.ndarray:
        return self.start_year + self.step * np.arange(self.n_periods)

    @property
    def end_year(self) -> int:
        return int(self.start_year + self.step * (self.n_periods - 1))

    @property
    def annual(self) -> bool:
        return self.step == 1

    def index_of(self, year: int) -> int:
        off = year - self.start_year
        if off % self.step or not 0 <= off // self.step < self.n_periods:
            raise KeyError(f"year {year} is not on the grid")
        return off // self.step

    def extended(self, end_year: int) -> "TimeGrid":
        n = (end_year - self.start_year) // self.step + 1
        return TimeGrid(self.start_year, self.step, max(n, self.n_periods))


@dataclass(frozen=True)
class RawObservation:
    country: int
    year: float
    tfr: float
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tfr > 0:
            raise ValueError(f"raw TFR must be positive, got {self.tfr}")
        if not 1900 <= self.year <= 2100:
            raise ValueError(f"observation year {self.year} outside [1900, 2100]")


@dataclass
class ReferenceSeries:
    country: int
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_periods,):
            raise ValueError(
                f"country {self.country}: {self.values.size} values for "
                f"{self.grid.n_periods} periods"
            )
        if np.any(~(self.values > 0)):
            raise ValueError(f"country {self.country}: reference TFR must be positive")


@dataclass(frozen=True)
class PhaseMarkers:
    """Phase II start ``tau`` and Phase III start ``lam`` as period indices.

    ``tau == BEFORE_START`` means Phase II was already under way at the first
    period; ``lam == NOT_REACHED`` means the country is still in transition.
    """

    tau: int = BEFORE_START
    lam: int = NOT_REACHED

    def __post_init__(self):
        if self.tau != BEFORE_START and self.lam != NOT_REACHED and not self.tau < self.lam:
            raise ValueError(f"tau ({self.tau}) must precede lambda ({self.lam})")


@dataclass
class Phase2CountryParams:
    delta1: float
    delta2: float
    delta3: float
    delta4: float
    dc: float
    Uc: float
    gamma1: float
    gamma2: float
    gamma3: float
    dc_star: float
    delta4_prime: float

    @classmethod
    def from_transformed(cls, gamma, delta4_prime, dc_star, U, annual=False):
        gamma = np.asarray(gamma, dtype=float)
        d4 = float(delta4_from_prime(delta4_prime))
        p = softmax(gamma)
        d1, d2, d3 = (p * (U - d4)).tolist()
        return cls(
            delta1=d1, delta2=d2, delta3=d3, delta4=d4,
            dc=float(dc_from_star(dc_star, annual)), Uc=float(U),
            gamma1=float(gamma[0]), gamma2=float(gamma[1]), gamma3=float(gamma[2]),
            dc_star=float(dc_star), delta4_prime=float(delta4_prime),
        )

    @property
    def shares(self) -> np.ndarray:
        return np.array([self.delta1, self.delta2, self.delta3]) / (self.Uc - self.delta4)


@dataclass
class Phase2Hyper:
    chi: float = -1.5
    psi: float = 0.72
    Delta4: float = 0.3
    delta4: float = 1.2
    alpha: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.5, 1.5]))
    delta: np.ndarray = field(default_factory=lambda: np.full(3, 1.2))
    sigma0: float = 0.3
    a: float = 0.05
    b: float = 0.05
    S: float = 5.0
    const_c: float = 1.4
    m_tau: float = 0.0
    s_tau: float = 0.48
    phi: Optional[float] = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)


@dataclass
class Phase3CountryParams:
    mu_c: float
    rho_c: float


@dataclass
class Phase3Hyper:
    mu_bar: float = 1.05
    sigma_mu: float = 0.159
    rho_bar: float = 0.5
    sigma_rho: float = 0.1445
    sigma_eps: float = 0.25


@dataclass
class MeasurementParams:
    """Per-observation bias and sd linked to the latent TFR grid.

    Observation ``j`` has mean ``w_lo[j] * f[country[j], t_lo[j]] +
    w_hi[j] * f[country[j], t_hi[j]] + bias[j]``.
    """

    country: np.ndarray  # row index into ModelState.countries
    t_lo: np.ndarray
    t_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    y: np.ndarray
    bias: np.ndarray
    sd: np.ndarray

    @classmethod
    def empty(cls) -> "MeasurementParams":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(zi, zi, zi, z, z, z, z, z)

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "MeasurementParams":
        return MeasurementParams(*(getattr(self, k)[mask] for k in _MEAS_FIELDS))

    @classmethod
    def concat(cls, parts) -> "MeasurementParams":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in _MEAS_FIELDS))


_MEAS_FIELDS = ("country", "t_lo", "t_hi", "w_lo", "w_hi", "y", "bias", "sd")


@dataclass
class ModelState:
    """Complete sampler state for one chain."""

    countries: np.ndarray
    grid: TimeGrid
    hyper2: Phase2Hyper
    hyper3: Phase3Hyper
    gamma: np.ndarray  # (n_countries, 3)
    delta4_prime: np.ndarray
    dc_star: np.ndarray
    U: np.ndarray
    mu_c: np.ndarray  # NaN outside Phase III countries
    rho_c: np.ndarray
    tau: np.ndarray
    lam: np.ndarray
    tfr: np.ndarray  # (n_countries, n_periods)
    u_lower: np.ndarray  # lower bound of the U_c prior, from the reference series
    meas: MeasurementParams = field(default_factory=MeasurementParams.empty)
    annual: bool = False
    ar_phase2: bool = False
    uncertainty: bool = False
    sigma0_min: float = 0.01

    def __post_init__(self):
        self.countries = np.asarray(self.countries, dtype=int)
        self.tau = np.asarray(self.tau, dtype=int)
        self.lam = np.asarray(self.lam, dtype=int)
        if self.ar_phase2 and self.hyper2.phi is None:
            self.hyper2.phi = 0.5

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    @property
    def u_pinned(self) -> np.ndarray:
        """Countries whose U_c equals the latent TFR at tau."""
        return self.tau >= 0

    @property
    def in_phase3(self) -> np.ndarray:
        return self.lam >= 0

    def row(self, code: int) -> int:
        idx = np.flatnonzero(self.countries == code)
        if idx.size == 0:
            raise KeyError(f"country {code} not in state")
        return int(idx[0])

    def sync_u(self):
        """Re-pin U_c to f_{c,tau} for countries with an observed Phase II start."""
        pinned = self.u_pinned
        if pinned.any():
            rows = np.flatnonzero(pinned)
            self.U[rows] = self.tfr[rows, self.tau[rows]]

    # Derived double-logistic parameters, shape (n_countries,)
    @property
    def dc(self) -> np.ndarray:
        return dc_from_star(self.dc_star, self.annual)

    @property
    def delta4(self) -> np.ndarray:
        return delta4_from_prime(self.delta4_prime)

    @property
    def deltas(self) -> np.ndarray:
        """Delta_c1..Delta_c3 as an (n_countries, 3) array."""
        return softmax(self.gamma, axis=1) * (self.U - self.delta4)[:, None]

    def country_params(self, i: int) -> Phase2CountryParams:
        return Phase2CountryParams.from_transformed(
            self.gamma[i], self.delta4_prime[i], self.dc_star[i], self.U[i], self.annual
        )

    def markers(self, i: int) -> PhaseMarkers:
        return PhaseMarkers(int(self.tau[i]), int(self.lam[i]))

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


@dataclass
class TrajectorySet:
    """Posterior TFR paths per country over past and projected periods.

    ``n_past`` leading columns are estimation periods; ``past_sampled`` says
    whether they carry posterior draws (uncertainty on) or the reference.
    """

    grid: TimeGrid
    n_past: int
    trajectories: dict  # country code -> (n_traj, n_periods)
    past_sampled: bool = True

    def __post_init__(self):
        shapes = {v.shape[0] for v in self.trajectories.values()}
        if len(shapes) > 1:
            raise ValueError("all countries must have the same number of trajectories")

    @property
    def n_trajectories(self) -> int:
        return next(iter(self.trajectories.values())).shape[0] if self.trajectories else 0


def validate_phase2_params(p: Phase2CountryParams, annual: bool, tol: float = 1e-12) -> list[str]:
    out = []
    lo, hi = dc_bounds(annual)
    if not lo < p.dc < hi:
        out.append(f"d_c={p.dc} outside ({lo}, {hi})")
    if not DELTA4_BOUNDS[0] < p.delta4 < DELTA4_BOUNDS[1]:
        out.append(f"Delta_c4={p.delta4} outside {DELTA4_BOUNDS}")
    if not p.Uc > p.delta4:
        out.append(f"U_c={p.Uc} must exceed Delta_c4={p.delta4}")
    else:
        shares = p.shares
        if abs(shares.sum() - 1.0) > 1e-9:
            out.append(f"share normalization: sum p_ci = {shares.sum():.6g} != 1")
        softmax_p = softmax([p.gamma1, p.gamma2, p.gamma3])
        if np.max(np.abs(softmax_p - shares)) > 1e-9:
            out.append("shares p_ci inconsistent with gamma_ci")
    if abs(dc_to_star(p.dc, annual) - p.dc_star) > 1e-9 * max(1.0, abs(p.dc_star)):
        out.append("d_c and d_c* inconsistent")
    if abs(delta4_to_prime(p.delta4) - p.delta4_prime) > 1e-9 * max(1.0, abs(p.delta4_prime)):
        out.append("Delta_c4 and Delta'_c4 inconsistent")
    return out


def _bound(name, value, lo, hi, out, open_lo=False, open_hi=False):
    if value is None or not np.isfinite(value):
        out.append(f"{name} is not finite")
        return
    bad_lo = value <= lo if open_lo else value < lo
    bad_hi = value >= hi if open_hi else value > hi
    if bad_lo or bad_hi:
        l = "(" if open_lo else "["
        r = ")" if open_hi else "]"
        out.append(f"{name}={value} outside {l}{lo}, {hi}{r}")


def validate_state(state: ModelState) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    out: list[str] = []
    h2, h3 = state.hyper2, state.hyper3
    _bound("sigma0", h2.sigma0, state.sigma0_min, 0.6, out)
    _bound("a", h2.a, 0.0, 0.2, out)
    _bound("b", h2.b, 0.0, 0.2, out)
    _bound("S", h2.S, 3.5, 6.5, out)
    _bound("c", h2.const_c, 0.8, 2.0, out)
    if state.ar_phase2:
        _bound("phi", h2.phi, 0.0, 1.0, out, open_lo=True, open_hi=True)
    for name in ("psi", "delta4", "s_tau"):
        if not getattr(h2, name) > 0:
            out.append(f"{name} must be positive")
    if np.any(~(h2.delta > 0)):
        out.append("delta_i must be positive")
    _bound("mu_bar", h3.mu_bar, 0.0, 2.1, out)
    _bound("sigma_mu", h3.sigma_mu, 0.0, 0.318, out)
    _bound("rho_bar", h3.rho_bar, 0.0, 1.0, out)
    _bound("sigma_rho", h3.sigma_rho, 0.0, 0.289, out)
    _bound("sigma_eps", h3.sigma_eps, 0.0, 0.5, out)

    n_c, n_t = state.n_countries, state.grid.n_periods
    if state.tfr.shape != (n_c, n_t):
        out.append(f"tfr matrix shape {state.tfr.shape} != ({n_c}, {n_t})")
    elif np.any(~(state.tfr > 0)):
        out.append("latent tfr entries must be positive")
    if len(np.unique(state.countries)) != n_c or np.any(state.countries <= 0):
        out.append("country codes must be positive and unique")

    for i, code in enumerate(state.countries):
        for msg in validate_phase2_params(state.country_params(i), state.annual):
            out.append(f"country {code}: {msg}")
        tau, lam = int(state.tau[i]), int(state.lam[i])
        if tau >= 0 and lam >= 0 and not tau < lam:
            out.append(f"country {code}: tau={tau} not before lambda={lam}")
        if lam >= 0:
            rho, mu = state.rho_c[i], state.mu_c[i]
            if not 0 < rho < 1:
                out.append(f"country {code}: rho_c={rho} outside (0, 1)")
            if not mu >= 0:
                out.append(f"country {code}: mu_c={mu} must be >= 0")

    if len(state.meas) and np.any(~(state.meas.sd > 0)):
        out.append("measurement sd values must be positive")
    return out
