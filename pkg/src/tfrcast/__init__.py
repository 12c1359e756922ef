"""Bayesian hierarchical estimation and probabilistic projection of total
fertility rates."""
from importlib import resources

from .diagnostics import diagnose, estimation_quantiles, psrf, summarize
from .engine import ChainStore, ConfigurationError, IntegrityError, RunConfig, continue_run, run, run_extra
from .ingest import DataFormatError, load_raw, load_reference
from .measurement import UNBIASED_VR_COUNTRIES, fit_bias_sd
from .phases import find_lambda, find_tau, phase_markers
from .projection import load_predictions, predict, trajectory_table
from .types import ModelState, TimeGrid, TrajectorySet, validate_state

__version__ = "0.1.0"


def sample_data_path(name: str):
    """Path of a bundled sample file: ``"raw"`` or ``"reference"``."""
    files = {"raw": "sample_raw.csv", "reference": "sample_reference.csv"}
    return resources.files(__name__) / "data" / files[name]
