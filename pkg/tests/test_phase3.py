import math

import numpy as np
import pytest

from tfrcast.phase3 import (
    HYPER3_BOUNDS,
    draw_phase3_country,
    mu_conditional,
    phase3_loglik,
    rho_conditional,
    sample_phase3_sweep,
)
from tfrcast.types import Phase3Hyper

from conftest import make_state


def ar1(n, mu, rho, sd, f0, rng):
    f = np.empty(n)
    f[0] = f0
    for t in range(n - 1):
        f[t + 1] = mu + rho * (f[t] - mu) + sd * rng.standard_normal()
    return f


def test_mu_conditional_rho_zero_is_normal_mean_update():
    rng = np.random.default_rng(0)
    x, y = rng.normal(2, 0.2, 30), rng.normal(1.9, 0.2, 30)
    mean, sd = mu_conditional(x, y, 0.0, 0.2, 1.05, 0.159)
    prec = 1 / 0.159 ** 2 + 30 / 0.2 ** 2
    assert mean == pytest.approx((1.05 / 0.159 ** 2 + y.sum() / 0.2 ** 2) / prec, abs=1e-10)
    assert sd == pytest.approx(1 / math.sqrt(prec), abs=1e-10)


def test_rho_conditional_closed_form():
    x, y = np.array([1.5, 1.7, 1.6]), np.array([1.7, 1.6, 1.8])
    mean, sd = rho_conditional(x, y, 1.8, 0.1, 0.5, 0.1445)
    xc, yc = x - 1.8, y - 1.8
    prec = 1 / 0.1445 ** 2 + xc @ xc / 0.01
    assert mean == pytest.approx((0.5 / 0.1445 ** 2 + xc @ yc / 0.01) / prec, abs=1e-12)
    assert sd == pytest.approx(prec ** -0.5, abs=1e-12)


def test_loglik_identities():
    h3 = Phase3Hyper(sigma_eps=0.2)
    s = make_state(np.r_[3.0, 2.5, np.full(6, 1.8)][None, :], lam=[2], mu_c=[1.8], rho_c=[0.0],
                   hyper3=h3)
    per = -math.log(0.2) - 0.5 * math.log(2 * math.pi)
    assert phase3_loglik(s, 10) == pytest.approx(5 * per, abs=1e-12)
    s.rho_c[0] = 0.7  # f_t = mu: conditional mean stays mu
    assert phase3_loglik(s, 10) == pytest.approx(5 * per, abs=1e-12)


def test_loglik_single_term_oracle():
    s = make_state(np.array([[3.0, 2.0, 1.7, 1.9]]), lam=[2], mu_c=[1.6], rho_c=[0.5],
                   hyper3=Phase3Hyper(sigma_eps=0.1))
    m = 1.6 + 0.5 * (1.7 - 1.6)
    want = -0.5 * ((1.9 - m) / 0.1) ** 2 - math.log(0.1) - 0.5 * math.log(2 * math.pi)
    assert phase3_loglik(s, 10) == pytest.approx(want, abs=1e-12)


def test_no_phase3_countries_is_noop():
    s = make_state(np.linspace(6, 3, 10)[None, :])
    before = s.copy()
    sample_phase3_sweep(s, np.random.default_rng(0))
    assert s.hyper3 == before.hyper3
    assert np.array_equal(s.mu_c, before.mu_c, equal_nan=True)


def test_long_series_recovers_truth_and_respects_supports():
    rng = np.random.default_rng(42)
    f = ar1(400, 1.8, 0.9, 0.1, 1.6, rng)
    s = make_state(np.r_[2.5, 2.2, f][None, :], lam=[2], mu_c=[1.5], rho_c=[0.5])
    draws = []
    for k in range(6000):
        sample_phase3_sweep(s, rng)
        h = s.hyper3
        for name, (lo, hi) in HYPER3_BOUNDS.items():
            assert lo <= getattr(h, name) <= hi
        assert 0 < s.rho_c[0] < 1 and s.mu_c[0] >= 0
        if k >= 1000:
            draws.append((s.mu_c[0], s.rho_c[0], h.sigma_eps))
    mu, rho, se = np.mean(draws, axis=0)
    assert abs(mu - 1.8) < 0.1
    assert abs(rho - 0.9) < 0.1
    assert abs(se - 0.1) < 0.1


def test_prior_draws_in_support():
    mu, rho = draw_phase3_country(Phase3Hyper(rho_bar=0.95, sigma_rho=0.289),
                                  np.random.default_rng(0), size=5000)
    assert np.all((rho > 0) & (rho < 1)) and np.all(mu >= 0)
