import dataclasses

import numpy as np
import pytest

from tfrcast.synthetic import simulate_world
from tfrcast.types import ModelState, Phase2Hyper, Phase3Hyper, TimeGrid

# (criterion, passed, detail) lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_state(tfr, start_year=1990, annual=True, ar=False, uncertainty=False, tau=None,
               lam=None, codes=None, gamma=(-1.0, 0.5, 1.5), delta4=1.8, dc=0.2, U=None,
               mu_c=None, rho_c=None, hyper2=None, hyper3=None):
    """Hand-built state; all countries share the same Phase II parameters."""
    tfr = np.atleast_2d(np.asarray(tfr, dtype=float))
    n_c, n_t = tfr.shape
    grid = TimeGrid(start_year, 1 if annual else 5, n_t)
    from tfrcast.types import dc_to_star, delta4_to_prime

    h2 = hyper2 or Phase2Hyper()
    if ar and h2.phi is None:
        h2.phi = 0.5
    U = np.full(n_c, 7.0) if U is None else np.broadcast_to(np.asarray(U, float), (n_c,)).copy()
    lam = np.full(n_c, -1) if lam is None else np.asarray(lam)
    return ModelState(
        countries=np.arange(1, n_c + 1) * 10 if codes is None else np.asarray(codes),
        grid=grid, hyper2=h2, hyper3=hyper3 or Phase3Hyper(),
        gamma=np.tile(np.asarray(gamma, float), (n_c, 1)),
        delta4_prime=np.full(n_c, float(delta4_to_prime(delta4))),
        dc_star=np.full(n_c, float(dc_to_star(dc, annual))),
        U=U,
        mu_c=np.where(lam >= 0, 1.8, np.nan) if mu_c is None else np.asarray(mu_c, float),
        rho_c=np.where(lam >= 0, 0.8, np.nan) if rho_c is None else np.asarray(rho_c, float),
        tau=np.full(n_c, -1) if tau is None else np.asarray(tau), lam=lam, tfr=tfr,
        u_lower=np.minimum(5.5, tfr.max(axis=1)), annual=annual, ar_phase2=ar,
        uncertainty=uncertainty, sigma0_min=0.04 if annual else 0.01,
    )


def with_tfr(state, tfr):
    """Shallow copy with a different latent matrix (for cheap hand-built stores)."""
    return dataclasses.replace(state, tfr=tfr)


@pytest.fixture(scope="session")
def small_world():
    return simulate_world(n_countries=4, n_periods=25, seed=1, n_vr=2)
