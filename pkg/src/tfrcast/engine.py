"""Chain orchestration and persistence.

A simulation lives in one output directory::

    out/
      meta.json                 run settings, countries, phase markers
      raw_data.csv, reference.csv
      mc1/ ... mcK/             Phase II traces + checkpoint.pkl
      phaseIII/meta.json, mc1/ ... mcK/
      predictions/              written by projection.predict
      thinned_mcmc_<thin>_<burnin>/
      diagnostics/

Each trace file holds one row per stored iteration. The checkpoint next to
the traces stores the exact sampler state, the random-generator state and a
SHA-256 digest of every trace file, so a continued chain is bitwise
identical to an uninterrupted one and tampering is detected.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .ingest import (
    RawDataset,
    interpolate_reference,
    load_raw,
    load_reference,
    write_raw,
    write_reference,
)
from .measurement import measurement_for_countries
from .phase2 import (
    Tuning,
    default_sigma0_min,
    mh_country_params,
    mh_latent_tfr,
    sample_phase2_sweep,
)
from .phase3 import gibbs_country_phase3, sample_phase3_sweep
from .phases import phase_markers
from .types import (
    MeasurementParams,
    ModelState,
    Phase2Hyper,
    Phase3Hyper,
    ReferenceSeries,
    TimeGrid,
    dc_to_star,
    delta4_to_prime,
)

log = logging.getLogger(__name__)

TRACE_FMT = "%.15g"
META_FILE = "meta.json"
CHECKPOINT_FILE = "checkpoint.pkl"
PHASE3_DIR = "phaseIII"

# trace file name -> Phase2Hyper attribute
PHASE2_HYPER_FILES = {
    "alpha": "alpha", "delta": "delta", "Triangle4": "Delta4", "delta4": "delta4",
    "psi": "psi", "chi": "chi", "a_sd": "a", "b_sd": "b", "const_sd": "const_c",
    "S_sd": "S", "sigma0": "sigma0", "mean_eps_tau": "m_tau", "sd_eps_tau": "s_tau",
}
AR_FILE = "rho_phase2"
PHASE2_COUNTRY_FILES = ("gamma", "Triangle_c4", "d", "U")
LATENT_FILE = "tfr"
PHASE3_HYPER_FILES = {
    "mu": "mu_bar", "rho": "rho_bar", "sigma.mu": "sigma_mu",
    "sigma.rho": "sigma_rho", "sigma.eps": "sigma_eps",
}
PHASE3_COUNTRY_FILES = ("mu.c", "rho.c")

STREAM_PHASE2, STREAM_PHASE3, STREAM_EXTRA, STREAM_PREDICT = 0, 1, 2, 3


class ConfigurationError(ValueError):
    """Inconsistent run settings, detected before any sampling."""


class IntegrityError(RuntimeError):
    """A persisted trace file is missing or was modified outside the engine."""


@dataclass
class RunConfig:
    output_dir: str
    n_chains: int = 3
    iters: int = 5000
    thin: int = 1
    burnin: Optional[int] = None  # iterations of proposal adaptation
    annual: bool = False
    ar_phase2: bool = False
    uncertainty: bool = False
    sigma0_min: Optional[float] = None
    unbiased_vr: tuple = ()
    seed: int = 1
    parallel: bool = False
    covariates: tuple = ("source", "method")
    cont_covariates: tuple = ()
    source_column: str = "source"
    start_year: Optional[int] = None
    present_year: Optional[int] = None
    flush_every: int = 200
    replace_output: bool = False

    def checked(self) -> "RunConfig":
        """Validated copy with mode-dependent defaults filled in."""
        if self.n_chains < 1:
            raise ConfigurationError("need at least one chain")
        if not self.iters >= self.thin >= 1:
            raise ConfigurationError(f"need iters >= thin >= 1 (iters={self.iters}, thin={self.thin})")
        cfg = replace(self, unbiased_vr=tuple(int(c) for c in self.unbiased_vr),
                      covariates=tuple(self.covariates), cont_covariates=tuple(self.cont_covariates))
        if cfg.burnin is None:
            cfg.burnin = min(2000, cfg.iters // 2)
        if not 0 <= cfg.burnin < cfg.iters:
            raise ConfigurationError(f"burnin ({cfg.burnin}) must be in [0, iters={cfg.iters})")
        if cfg.ar_phase2 and not cfg.annual:
            warnings.warn("ar_phase2 is ignored for five-year data", stacklevel=3)
            cfg.ar_phase2 = False
        if cfg.sigma0_min is None:
            cfg.sigma0_min = default_sigma0_min(cfg.annual)
        if not 0 < cfg.sigma0_min < 0.6:
            raise ConfigurationError(f"sigma0_min={cfg.sigma0_min} must lie in (0, 0.6)")
        return cfg


# ---------------------------------------------------------------------------
# trace records


def phase2_record(state: ModelState) -> dict:
    """Trace rows of one stored Phase II iteration, keyed by file stem."""
    h = state.hyper2
    rec = {name: np.atleast_1d(getattr(h, attr)) for name, attr in PHASE2_HYPER_FILES.items()}
    if state.ar_phase2:
        rec[AR_FILE] = np.atleast_1d(h.phi)
    d4, dc = state.delta4, state.dc
    for i, code in enumerate(state.countries):
        rec[f"gamma_country{code}"] = state.gamma[i]
        rec[f"Triangle_c4_country{code}"] = d4[i:i + 1]
        rec[f"d_country{code}"] = dc[i:i + 1]
        rec[f"U_country{code}"] = state.U[i:i + 1]
        if state.uncertainty:
            rec[f"{LATENT_FILE}_country{code}"] = state.tfr[i]
    return rec


def phase3_record(state: ModelState) -> dict:
    h = state.hyper3
    rec = {name: np.atleast_1d(getattr(h, attr)) for name, attr in PHASE3_HYPER_FILES.items()}
    for i in np.flatnonzero(state.in_phase3):
        code = state.countries[i]
        rec[f"mu.c_country{code}"] = state.mu_c[i:i + 1]
        rec[f"rho.c_country{code}"] = state.rho_c[i:i + 1]
    return rec


def _format_row(values) -> str:
    return " ".join(TRACE_FMT % v for v in np.ravel(values))


class TraceWriter:
    """Buffers rows per file and appends them on ``flush``."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.buffers: dict[str, list[str]] = {}

    def append(self, record: Mapping[str, np.ndarray]):
        for name, vals in record.items():
            self.buffers.setdefault(name, []).append(_format_row(vals))

    def __len__(self):
        return max((len(v) for v in self.buffers.values()), default=0)

    def flush(self):
        for name, rows in self.buffers.items():
            if rows:
                with open(self.directory / f"{name}.txt", "a") as fh:
                    fh.write("\n".join(rows) + "\n")
        self.buffers = {k: [] for k in self.buffers}

    def touch(self, names: Iterable[str]):
        for name in names:
            (self.directory / f"{name}.txt").touch()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_trace(path: Path) -> np.ndarray:
    """Load one trace file as a 2-D array (rows x columns)."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"missing trace file {path}")
    if path.stat().st_size == 0:
        return np.zeros((0, 1))
    return np.loadtxt(path, ndmin=2)


# ---------------------------------------------------------------------------
# store


class ChainStore:
    """Read access to a simulation directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / META_FILE
        if not meta_path.exists():
            raise FileNotFoundError(f"{self.root} holds no simulation ({META_FILE} missing)")
        self.meta = json.loads(meta_path.read_text())

    # settings
    @property
    def n_chains(self) -> int:
        return int(self.meta["n_chains"])

    @property
    def thin(self) -> int:
        return int(self.meta["thin"])

    @property
    def grid(self) -> TimeGrid:
        g = self.meta["grid"]
        return TimeGrid(g["start_year"], g["step"], g["n_periods"])

    @property
    def countries(self) -> list[int]:
        return [int(c) for c in self.meta["countries"]]

    @property
    def phase3_countries(self) -> list[int]:
        return [c for c, lam in zip(self.countries, self.meta["lam"]) if lam >= 0]

    @property
    def uncertainty(self) -> bool:
        return bool(self.meta["uncertainty"])

    @property
    def ar_phase2(self) -> bool:
        return bool(self.meta["ar_phase2"])

    @property
    def annual(self) -> bool:
        return bool(self.meta["annual"])

    def chain_dir(self, chain: int, phase3: bool = False) -> Path:
        base = self.root / PHASE3_DIR if phase3 else self.root
        return base / f"mc{chain}"

    def hyper_names(self, phase3: bool = False) -> list[str]:
        if phase3:
            return list(PHASE3_HYPER_FILES)
        names = list(PHASE2_HYPER_FILES)
        if self.ar_phase2:
            names.append(AR_FILE)
        return names

    def country_names(self, phase3: bool = False) -> list[str]:
        if phase3:
            return list(PHASE3_COUNTRY_FILES)
        names = list(PHASE2_COUNTRY_FILES)
        if self.uncertainty:
            names.append(LATENT_FILE)
        return names

    def trace_files(self, chain: int, phase3: bool = False) -> list[Path]:
        d = self.chain_dir(chain, phase3)
        out = [d / f"{n}.txt" for n in self.hyper_names(phase3)]
        codes = self.phase3_countries if phase3 else self.countries
        for code in codes:
            out += [d / f"{n}_country{code}.txt" for n in self.country_names(phase3)]
        return out

    def read(self, name: str, chain: int, country: Optional[int] = None,
             phase3: Optional[bool] = None) -> np.ndarray:
        if phase3 is None:
            phase3 = name in PHASE3_HYPER_FILES or name in PHASE3_COUNTRY_FILES
        stem = name if country is None else f"{name}_country{country}"
        return read_trace(self.chain_dir(chain, phase3) / f"{stem}.txt")

    def n_rows(self, chain: int, phase3: bool = False) -> int:
        name = self.hyper_names(phase3)[0]
        path = self.chain_dir(chain, phase3) / f"{name}.txt"
        with open(path, "rb") as fh:
            return sum(1 for _ in fh)

    def burnin_rows(self, burnin: int) -> int:
        """Stored rows falling in the first ``burnin`` iterations."""
        return int(burnin) // self.thin

    def load_raw(self) -> Optional[RawDataset]:
        p = self.root / "raw_data.csv"
        if not p.exists():
            return None
        return load_raw(p, self.meta["covariates"], self.meta["cont_covariates"])

    def load_reference(self) -> dict[int, ReferenceSeries]:
        return load_reference(self.root / "reference.csv")

    def load_checkpoint(self, chain: int, phase3: bool = False) -> dict:
        with open(self.chain_dir(chain, phase3) / CHECKPOINT_FILE, "rb") as fh:
            return pickle.load(fh)

    def state_at(self, chain: int, row: int) -> ModelState:
        """Rebuild the persisted state of one stored iteration.

        Values are read back from the text traces (15 significant digits).
        """
        state = self.load_checkpoint(chain)["state"].copy()
        h2 = state.hyper2
        for name, attr in PHASE2_HYPER_FILES.items():
            v = self.read(name, chain)[row]
            setattr(h2, attr, v.copy() if v.size > 1 else float(v[0]))
        if self.ar_phase2:
            h2.phi = float(self.read(AR_FILE, chain)[row, 0])
        for i, code in enumerate(self.countries):
            state.gamma[i] = self.read("gamma", chain, code)[row]
            state.delta4_prime[i] = delta4_to_prime(self.read("Triangle_c4", chain, code)[row, 0])
            state.dc_star[i] = dc_to_star(self.read("d", chain, code)[row, 0], state.annual)
            state.U[i] = self.read("U", chain, code)[row, 0]
            if self.uncertainty:
                state.tfr[i] = self.read(LATENT_FILE, chain, code)[row]
        h3 = state.hyper3
        for name, attr in PHASE3_HYPER_FILES.items():
            setattr(h3, attr, float(self.read(name, chain, phase3=True)[row, 0]))
        for code in self.phase3_countries:
            i = state.row(code)
            state.mu_c[i] = self.read("mu.c", chain, code, phase3=True)[row, 0]
            state.rho_c[i] = self.read("rho.c", chain, code, phase3=True)[row, 0]
        return state


def _write_meta(path: Path, meta: dict):
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# initial state


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def prepare_reference(reference: Mapping[int, ReferenceSeries], annual: bool,
                      start_year=None, present_year=None) -> dict[int, ReferenceSeries]:
    """Bring every reference series onto one grid of the requested step."""
    series = list(reference.values())
    if not series:
        raise ConfigurationError("reference dataset is empty")
    g = series[0].grid
    if any(s.grid != g for s in series):
        raise ConfigurationError("reference series do not share one time grid")
    start = g.start_year if start_year is None else int(start_year)
    end = g.end_year if present_year is None else int(present_year)
    if annual:
        target = TimeGrid(start, 1, end - start + 1)
        if g.step == 5:
            return {c: interpolate_reference(s, target) for c, s in reference.items()}
    else:
        if g.step != 5:
            raise ConfigurationError("five-year estimation needs a five-year reference series")
        target = TimeGrid(start, 5, (end - start) // 5 + 1)
    if target.start_year < g.start_year or target.end_year > g.end_year:
        raise ConfigurationError(
            f"requested span {target.start_year}-{target.end_year} outside reference "
            f"span {g.start_year}-{g.end_year}")
    lo = (target.start_year - g.start_year) // g.step
    return {c: ReferenceSeries(c, target, s.values[lo:lo + target.n_periods])
            for c, s in reference.items()}


def initial_state(reference: Mapping[int, ReferenceSeries], cfg: RunConfig,
                  meas: Optional[MeasurementParams] = None) -> ModelState:
    """Hyperparameters at prior medians, country parameters at their prior
    means given those, latent TFR at the reference series."""
    codes = sorted(reference)
    grid = reference[codes[0]].grid
    tfr = np.vstack([reference[c].values for c in codes])
    markers = [phase_markers(reference[c], cfg.annual) for c in codes]
    tau = np.array([m.tau for m in markers])
    lam = np.array([m.lam for m in markers])
    n = len(codes)

    h2 = Phase2Hyper(sigma0=0.5 * (cfg.sigma0_min + 0.6))
    h3 = Phase3Hyper()
    u_lower = np.minimum(5.5, tfr.max(axis=1))
    U = np.where(tau >= 0, tfr[np.arange(n), np.maximum(tau, 0)], 0.5 * (u_lower + 8.8))
    in3 = lam >= 0
    state = ModelState(
        countries=np.array(codes), grid=grid, hyper2=h2, hyper3=h3,
        gamma=np.tile(h2.alpha, (n, 1)),
        delta4_prime=np.full(n, h2.Delta4),
        dc_star=np.full(n, h2.chi),
        U=U,
        mu_c=np.where(in3, h3.mu_bar, np.nan),
        rho_c=np.where(in3, h3.rho_bar, np.nan),
        tau=tau, lam=lam, tfr=tfr, u_lower=u_lower,
        meas=meas if meas is not None else MeasurementParams.empty(),
        annual=cfg.annual, ar_phase2=cfg.ar_phase2, uncertainty=cfg.uncertainty,
        sigma0_min=cfg.sigma0_min,
    )
    # U must clear the lower asymptote for the shares to be defined
    low = ~(state.U > state.delta4 + 1e-3)
    if low.any():
        state.delta4_prime[low] = delta4_to_prime(np.clip(state.U[low] - 0.5, 1.01, 2.49))
    return state


# ---------------------------------------------------------------------------
# chain execution


def _save_checkpoint(directory: Path, payload: dict, files: Sequence[Path]):
    payload = dict(payload)
    payload["digests"] = {p.name: file_digest(p) for p in files}
    tmp = directory / (CHECKPOINT_FILE + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, directory / CHECKPOINT_FILE)


def verify_integrity(store: ChainStore, chain: int, phase3: bool = False,
                     extra_files: Sequence[Path] = ()) -> dict:
    """Compare every trace file of a chain with the digests in its checkpoint."""
    directory = store.chain_dir(chain, phase3)
    ck_path = directory / CHECKPOINT_FILE
    if not ck_path.exists():
        raise IntegrityError(f"missing checkpoint {ck_path}")
    ck = store.load_checkpoint(chain, phase3)
    for path in list(store.trace_files(chain, phase3)) + list(extra_files):
        if not path.exists():
            raise IntegrityError(f"missing trace file {path}")
        want = ck["digests"].get(path.name)
        if want is None or file_digest(path) != want:
            raise IntegrityError(f"trace file {path} does not match its checkpoint")
    return ck


def _chain_task(root: str, chain: int, n_iters: int, phase3_only: bool) -> dict:
    """Advance one chain by ``n_iters`` sweeps from its checkpoint."""
    store = ChainStore(root)
    one_step = not phase3_only and store.meta["one_step"]
    directory = store.chain_dir(chain, phase3_only)
    p3_dir = store.chain_dir(chain, True)
    files = list(store.trace_files(chain, phase3_only))
    if one_step:
        files += store.trace_files(chain, True)
    ck = verify_integrity(store, chain, phase3_only,
                          store.trace_files(chain, True) if one_step else ())

    state: ModelState = ck["state"]
    tuning: Tuning = ck["tuning"]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = ck["rng"]
    iteration = int(ck["iteration"])
    thin = store.thin
    flush_every = int(store.meta.get("flush_every", 200))

    w_main = TraceWriter(directory)
    w3 = TraceWriter(p3_dir) if one_step else None
    for _ in range(n_iters):
        if phase3_only:
            sample_phase3_sweep(state, rng)
        else:
            sample_phase2_sweep(state, rng, tuning)
            if one_step:
                sample_phase3_sweep(state, rng)
        tuning.iteration += 1
        iteration += 1
        if iteration % thin == 0:
            if phase3_only:
                w_main.append(phase3_record(state))
            else:
                w_main.append(phase2_record(state))
                if one_step:
                    w3.append(phase3_record(state))
        if len(w_main) >= flush_every:
            w_main.flush()
            if w3 is not None:
                w3.flush()
    w_main.flush()
    if w3 is not None:
        w3.flush()
    _save_checkpoint(directory, {"state": state, "tuning": tuning, "rng": rng.bit_generator.state,
                                 "iteration": iteration}, files)
    return {"chain": chain, "iteration": iteration,
            "acceptance": {k: tuning.acceptance_rate(k) for k in tuning.proposed}}


def _thread_cap() -> Optional[int]:
    v = os.environ.get("TFR_ENGINE_THREADS")
    return max(1, int(v)) if v else None


def _run_tasks(root: Path, n_chains: int, n_iters: int, phase3_only: bool, parallel: bool):
    args = [(str(root), k, n_iters, phase3_only) for k in range(1, n_chains + 1)]
    workers = min(n_chains, _thread_cap() or os.cpu_count() or 1)
    if parallel and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_chain_task, *zip(*args)))
    return [_chain_task(*a) for a in args]


def _init_chain_dir(directory: Path, names: Iterable[str]):
    directory.mkdir(parents=True, exist_ok=True)
    TraceWriter(directory).touch(names)


def run(config: RunConfig, raw: Optional[RawDataset],
        reference: Mapping[int, ReferenceSeries]) -> ChainStore:
    """Fit measurement errors, detect phases, initialise and run all chains."""
    cfg = config.checked()
    root = Path(cfg.output_dir)
    if (root / META_FILE).exists():
        old = json.loads((root / META_FILE).read_text())
        for flag in ("annual", "ar_phase2", "uncertainty"):
            if bool(old.get(flag)) != bool(getattr(cfg, flag)):
                raise ConfigurationError(
                    f"{root} holds a simulation with {flag}={old.get(flag)}; mode flags cannot "
                    f"change (requested {getattr(cfg, flag)})")
        if not cfg.replace_output:
            raise ConfigurationError(f"{root} already holds a simulation; use continue or "
                                     "choose another output directory")
    if cfg.uncertainty and raw is None:
        raise ConfigurationError("uncertainty mode needs a raw-data file")

    ref = prepare_reference(reference, cfg.annual, cfg.start_year, cfg.present_year)
    codes = sorted(ref)
    grid = ref[codes[0]].grid
    meas, fits = MeasurementParams.empty(), {}
    if cfg.uncertainty:
        missing = [c for c in cfg.covariates if c not in raw.covariate_names]
        if missing:
            raise ConfigurationError(f"covariates {missing} not loaded from the raw file")
        meas, fits = measurement_for_countries(raw, ref, grid, codes, cfg.unbiased_vr,
                                               cfg.source_column)
    template = initial_state(ref, cfg, meas)

    root.mkdir(parents=True, exist_ok=True)
    for sub in ("predictions", "diagnostics"):
        (root / sub).mkdir(exist_ok=True)
    write_reference(ref, root / "reference.csv")
    if raw is not None:
        write_raw(raw, root / "raw_data.csv")

    meta = {
        "format": 1,
        "n_chains": cfg.n_chains, "iters": 0, "thin": cfg.thin, "burnin": cfg.burnin,
        "annual": cfg.annual, "ar_phase2": cfg.ar_phase2, "uncertainty": cfg.uncertainty,
        "one_step": cfg.uncertainty, "sigma0_min": cfg.sigma0_min, "seed": cfg.seed,
        "unbiased_vr": list(cfg.unbiased_vr), "covariates": list(cfg.covariates),
        "cont_covariates": list(cfg.cont_covariates), "source_column": cfg.source_column,
        "grid": {"start_year": grid.start_year, "step": grid.step, "n_periods": grid.n_periods},
        "countries": codes, "tau": template.tau.tolist(), "lam": template.lam.tolist(),
        "flush_every": cfg.flush_every,
        "convergence_rule": "split-chain PSRF < 1.1; latent tfr needs 95% converged",
        "extra": {},
    }
    _write_meta(root / META_FILE, meta)
    p3_root = root / PHASE3_DIR
    p3_root.mkdir(exist_ok=True)
    _write_meta(p3_root / META_FILE, {
        "mode": "one-step" if cfg.uncertainty else "two-step", "iters": 0, "thin": cfg.thin,
        "countries": [c for c, l in zip(codes, template.lam) if l >= 0], "seed": cfg.seed,
    })
    store = ChainStore(root)

    for k in range(1, cfg.n_chains + 1):
        state = template.copy()
        tuning = Tuning.for_state(state, cfg.burnin)
        d2 = store.chain_dir(k)
        files = store.trace_files(k)
        _init_chain_dir(d2, [p.stem for p in files])
        d3 = store.chain_dir(k, True)
        files3 = store.trace_files(k, True)
        _init_chain_dir(d3, [p.stem for p in files3])
        _save_checkpoint(d2, {"state": state, "tuning": tuning,
                              "rng": _rng(cfg.seed, STREAM_PHASE2, k).bit_generator.state,
                              "iteration": 0},
                         files + (files3 if cfg.uncertainty else []))
        if not cfg.uncertainty:
            _save_checkpoint(d3, {"state": state.copy(), "tuning": Tuning.for_state(state, 0),
                                  "rng": _rng(cfg.seed, STREAM_PHASE3, k).bit_generator.state,
                                  "iteration": 0}, files3)
    if cfg.uncertainty:
        tables = [f.table.assign(country_code=c) for c, f in fits.items()]
        if tables:
            pd.concat(tables, ignore_index=True).to_csv(root / "bias_sd.csv", index=False)
    return continue_run(store, cfg.iters, parallel=cfg.parallel)


def continue_run(store: ChainStore | str, extra_iters: int, parallel: bool = False,
                 **flags) -> ChainStore:
    """Resume every chain from its checkpoint for ``extra_iters`` more sweeps.

    Mode flags passed as keywords (``annual``, ``ar_phase2``, ``uncertainty``)
    must match the stored ones.
    """
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    for flag, value in flags.items():
        if value is not None and bool(value) != bool(store.meta.get(flag)):
            raise ConfigurationError(f"{flag} cannot change on continuation "
                                     f"(stored {store.meta.get(flag)}, requested {value})")
    if extra_iters < 0:
        raise ConfigurationError("iterations must be non-negative")
    if extra_iters == 0:
        return store
    if store.meta.get("extra"):
        raise ConfigurationError("chains were re-estimated for single countries ('extra'); "
                                 "they cannot be continued")
    for k in range(1, store.n_chains + 1):
        verify_integrity(store, k)
        if not store.meta["one_step"]:
            verify_integrity(store, k, True)
    results = _run_tasks(store.root, store.n_chains, extra_iters, False, parallel)
    if not store.meta["one_step"]:
        _run_tasks(store.root, store.n_chains, extra_iters, True, parallel)
    meta = store.meta
    meta["iters"] = int(meta["iters"]) + int(extra_iters)
    meta["acceptance"] = {str(r["chain"]): r["acceptance"] for r in results}
    _write_meta(store.root / META_FILE, meta)
    p3_meta_path = store.root / PHASE3_DIR / META_FILE
    p3_meta = json.loads(p3_meta_path.read_text())
    p3_meta["iters"] = meta["iters"]
    _write_meta(p3_meta_path, p3_meta)
    return ChainStore(store.root)


# ---------------------------------------------------------------------------
# country-specific re-estimation


def _hyper_rows(store: ChainStore, chain: int, phase3: bool = False) -> dict:
    return {name: store.read(name, chain, phase3=phase3) for name in store.hyper_names(phase3)}


def _set_hyper2(h: Phase2Hyper, rows: dict, r: int):
    for name, attr in PHASE2_HYPER_FILES.items():
        v = rows[name][r]
        setattr(h, attr, v.copy() if v.size > 1 else float(v[0]))
    if AR_FILE in rows:
        h.phi = float(rows[AR_FILE][r, 0])


def _set_hyper3(h: Phase3Hyper, rows: dict, r: int):
    for name, attr in PHASE3_HYPER_FILES.items():
        setattr(h, attr, float(rows[name][r, 0]))


def run_extra(store: ChainStore | str, countries: Iterable[int], raw: Optional[RawDataset] = None,
              covariates: Optional[Sequence[str]] = None, unbiased_vr: Optional[Iterable[int]] = None,
              iters: Optional[int] = None, burnin: Optional[int] = None,
              warmup: int = 200, annual: Optional[bool] = None,
              ar_phase2: Optional[bool] = None) -> ChainStore:
    """Re-estimate country-specific parameters of ``countries`` against the
    stored world-level traces.

    Every stored row ``r`` of chain ``k`` is replaced by the state reached
    after ``iters`` country-only sweeps run with the hyperparameters of
    post-burn-in row ``b + (r mod n_post)`` of the same chain. Hyperparameter
    files and other countries' files are not touched.
    """
    if not isinstance(store, ChainStore):
        store = ChainStore(store)
    for flag, value in (("annual", annual), ("ar_phase2", ar_phase2)):
        if value is not None and bool(value) != store.meta[flag]:
            raise ConfigurationError(f"{flag} is not subject to change in a re-estimation")
    codes = [int(c) for c in countries]
    if not codes:
        return store
    unknown = [c for c in codes if c not in store.countries]
    if unknown:
        raise ConfigurationError(f"country {unknown[0]} is not part of the simulation in {store.root}")
    meta = store.meta
    thin = store.thin
    iters = thin if iters is None else int(iters)
    if iters < 1:
        raise ConfigurationError("iters must be positive")
    burnin = int(meta["burnin"]) if burnin is None else int(burnin)
    burn_rows = store.burnin_rows(burnin)
    covariates = list(meta["covariates"] if covariates is None else covariates)
    vr = tuple(meta["unbiased_vr"] if unbiased_vr is None else unbiased_vr)
    if raw is None:
        raw = store.load_raw()
    elif covariates and any(c not in raw.covariate_names for c in covariates):
        raise ConfigurationError(f"raw data lacks covariates {covariates}")
    if raw is not None and covariates != list(raw.covariate_names):
        raw = RawDataset(raw.frame, covariates, list(raw.cont_covariate_names))
    ref = store.load_reference()
    grid = store.grid

    for k in range(1, store.n_chains + 1):
        verify_integrity(store, k)
        if not meta["one_step"]:
            verify_integrity(store, k, True)
    for code in codes:
        meas = MeasurementParams.empty()
        if store.uncertainty and raw is not None:
            meas, _ = measurement_for_countries(raw, ref, grid, [code], vr, meta["source_column"])
        for k in range(1, store.n_chains + 1):
            _extra_chain(store, k, code, meas, iters, burn_rows, warmup)
        stem = f"raw_data_extra_country{code}.csv"
        if raw is not None:
            write_raw(raw.for_country(code), store.root / stem)
        meta.setdefault("extra", {})[str(code)] = {
            "extra_iter": iters, "extra_thin": thin, "burnin": burnin, "warmup": warmup,
            "covariates": covariates, "unbiased_vr": list(vr),
            "raw_data_extra": stem if raw is not None else None,
        }
    _write_meta(store.root / META_FILE, meta)
    return ChainStore(store.root)


def _extra_chain(store: ChainStore, k: int, code: int, meas: MeasurementParams,
                 iters: int, burn_rows: int, warmup: int):
    ck = store.load_checkpoint(k)
    full: ModelState = ck["state"]
    i = full.row(code)
    n_rows = store.n_rows(k)
    n_post = n_rows - burn_rows
    if n_post < 1:
        raise ConfigurationError(f"chain {k} has no rows after burn-in {burn_rows}")
    h2_rows = _hyper_rows(store, k)
    h3_rows = _hyper_rows(store, k, True)
    ref_row = store.load_reference()[code].values

    st = ModelState(
        countries=np.array([code]), grid=full.grid, hyper2=Phase2Hyper(), hyper3=Phase3Hyper(),
        gamma=full.gamma[i:i + 1].copy(), delta4_prime=full.delta4_prime[i:i + 1].copy(),
        dc_star=full.dc_star[i:i + 1].copy(), U=full.U[i:i + 1].copy(),
        mu_c=full.mu_c[i:i + 1].copy(), rho_c=full.rho_c[i:i + 1].copy(),
        tau=full.tau[i:i + 1], lam=full.lam[i:i + 1], tfr=ref_row[None, :].copy(),
        u_lower=full.u_lower[i:i + 1], meas=meas, annual=full.annual,
        ar_phase2=full.ar_phase2, uncertainty=full.uncertainty, sigma0_min=full.sigma0_min,
    )
    st.sync_u()
    tuning = Tuning.for_state(st, warmup)
    tuning.log_scale["tfr"] = ck["tuning"].log_scale["tfr"][i:i + 1].copy()
    for name in ("gamma", "delta4_prime", "dc_star", "U"):
        tuning.log_scale[name] = ck["tuning"].log_scale[name][i:i + 1].copy()
    rng = _rng(int(store.meta["seed"]), STREAM_EXTRA, k, code)
    in3 = bool(st.in_phase3[0])

    def sweep(r):
        _set_hyper2(st.hyper2, h2_rows, r)
        _set_hyper3(st.hyper3, h3_rows, r)
        mh_country_params(st, rng, tuning)
        if st.uncertainty:
            mh_latent_tfr(st, rng, tuning)
        if in3:
            gibbs_country_phase3(st, rng)
        tuning.iteration += 1

    for w in range(warmup):
        sweep(burn_rows + w % n_post)
    d2 = store.chain_dir(k)
    d3 = store.chain_dir(k, True)
    w2, w3 = TraceWriter(d2), TraceWriter(d3)
    for r in range(n_rows):
        h = burn_rows + r % n_post
        for _ in range(iters):
            sweep(h)
        suffix = f"_country{code}"
        w2.append({n: v for n, v in phase2_record(st).items() if n.endswith(suffix)})
        if in3:
            w3.append({f"mu.c_country{code}": st.mu_c, f"rho.c_country{code}": st.rho_c})
    for w, names in ((w2, list(w2.buffers)), (w3, list(w3.buffers))):
        for name in names:
            (w.directory / f"{name}.txt").write_text("")
        w.flush()

    # keep the checkpoint digests in step with the rewritten files
    files = store.trace_files(k) + (store.trace_files(k, True) if store.meta["one_step"] else [])
    payload = {key: v for key, v in ck.items() if key != "digests"}
    _save_checkpoint(d2, payload, files)
    if not store.meta["one_step"]:
        ck3 = store.load_checkpoint(k, True)
        _save_checkpoint(d3, {key: v for key, v in ck3.items() if key != "digests"},
                         store.trace_files(k, True))


def write_state_store(root, chains: Sequence[Sequence[ModelState]], thin: int = 1,
                      seed: int = 1, burnin: int = 0) -> ChainStore:
    """Persist explicit per-chain state sequences as a store.

    Used to hand-build stores with chosen parameter values; the reference
    series is taken from the latent TFR of the first state.
    """
    root = Path(root)
    first = chains[0][0]
    root.mkdir(parents=True, exist_ok=True)
    for sub in ("predictions", "diagnostics", PHASE3_DIR):
        (root / sub).mkdir(exist_ok=True)
    g = first.grid
    ref = {int(c): ReferenceSeries(int(c), g, first.tfr[i]) for i, c in enumerate(first.countries)}
    write_reference(ref, root / "reference.csv")
    codes = [int(c) for c in first.countries]
    meta = {
        "format": 1, "n_chains": len(chains), "iters": len(chains[0]) * thin, "thin": thin,
        "burnin": burnin, "annual": first.annual, "ar_phase2": first.ar_phase2,
        "uncertainty": first.uncertainty, "one_step": first.uncertainty,
        "sigma0_min": first.sigma0_min, "seed": seed, "unbiased_vr": [],
        "covariates": [], "cont_covariates": [], "source_column": "source",
        "grid": {"start_year": g.start_year, "step": g.step, "n_periods": g.n_periods},
        "countries": codes, "tau": first.tau.tolist(), "lam": first.lam.tolist(),
        "flush_every": 200, "extra": {},
    }
    _write_meta(root / META_FILE, meta)
    _write_meta(root / PHASE3_DIR / META_FILE, {
        "mode": "one-step" if first.uncertainty else "two-step", "iters": meta["iters"],
        "thin": thin, "countries": [c for c, l in zip(codes, first.lam) if l >= 0], "seed": seed,
    })
    store = ChainStore(root)
    for k, states in enumerate(chains, start=1):
        d2, d3 = store.chain_dir(k), store.chain_dir(k, True)
        _init_chain_dir(d2, [])
        _init_chain_dir(d3, [])
        w2, w3 = TraceWriter(d2), TraceWriter(d3)
        for st in states:
            w2.append(phase2_record(st))
            w3.append(phase3_record(st))
        w2.flush()
        w3.flush()
        last = states[-1]
        payload = {"state": last, "tuning": Tuning.for_state(last, 0),
                   "rng": _rng(seed, STREAM_PHASE2, k).bit_generator.state,
                   "iteration": len(states) * thin}
        _save_checkpoint(d2, payload, store.trace_files(k) + store.trace_files(k, True))
        if not first.uncertainty:
            _save_checkpoint(d3, payload, store.trace_files(k, True))
    return store
