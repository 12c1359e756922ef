import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfrcast.engine import ConfigurationError, write_state_store
from tfrcast.phase2 import dl_decrement
from tfrcast.projection import (
    load_predictions,
    phase_switch_rule,
    predict,
    selection_indices,
    trajectory_table,
)
from tfrcast.types import Phase2Hyper, Phase3Hyper, TimeGrid, TrajectorySet

from conftest import make_state


def g_oracle(f, p):
    k = 2 * math.log(9)
    U = p.delta1 + p.delta2 + p.delta3 + p.delta4
    return (-p.dc / (1 + math.exp(-(k / p.delta1) * (f - U + 0.5 * p.delta1)))
            + p.dc / (1 + math.exp(-(k / p.delta3) * (f - p.delta4 - 0.5 * p.delta3))))


def quiet_hyper(phi=None):
    return Phase2Hyper(sigma0=0.0, a=0.0, b=0.0, phi=phi)


def store_of(tmp_path, state, rows=20, chains=2, name="s"):
    return write_state_store(tmp_path / name, [[state] * rows for _ in range(chains)])


def test_selection_arithmetic_production_case():
    idx, thin = selection_indices(3 * (5100 - 2100), 1000)
    assert thin == 9 and len(idx) == 1000 and idx[-1] == 8991


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 50_000))
def test_selection_exact_count(n, total):
    if n > total:
        with pytest.raises(ValueError):
            selection_indices(total, n)
        return
    idx, thin = selection_indices(total, n)
    assert len(idx) == n and idx[-1] < total
    assert np.all(np.diff(idx) == thin)


def test_phase_switch_rule():
    assert not phase_switch_rule(3.0, 2.9, False)
    assert not phase_switch_rule(2.2, 2.3, False)  # increase above 2
    assert phase_switch_rule(1.8, 1.85, False)
    assert phase_switch_rule(2.5, 1.0, True)  # absorbing


def test_constant_trajectories_table():
    ts = TrajectorySet(TimeGrid(2000, 1, 6), 3, {5: np.full((10, 6), 2.0)}, past_sampled=True)
    tab = trajectory_table(ts, 5)
    assert np.all(tab[["median", "0.025", "0.1", "0.9", "0.975"]].to_numpy() == 2.0)
    assert tab.loc[2003:, "+0.5child"].eq(2.5).all()
    assert tab.loc[2003:, "-0.5child"].eq(1.5).all()
    assert tab.loc[:2002, ["-0.5child", "+0.5child"]].isna().all().all()
    with pytest.raises(KeyError):
        trajectory_table(ts, 6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_quantiles_monotone(n, seed):
    rng = np.random.default_rng(seed)
    ts = TrajectorySet(TimeGrid(2000, 1, 8), 4, {1: rng.lognormal(0.5, 0.5, (n, 8))})
    q = trajectory_table(ts, 1)[["0.025", "0.1", "median", "0.9", "0.975"]].to_numpy()
    assert np.all(np.diff(q, axis=1) >= -1e-12)


def test_sigma_zero_gives_deterministic_decline(tmp_path):
    s = make_state(np.linspace(6.0, 4.0, 20)[None, :], hyper2=quiet_hyper())
    store = store_of(tmp_path, s)
    ts = predict(store, 2060, n_traj=10)
    p = s.country_params(0)
    f, want = 4.0, []
    for _ in range(2060 - 2009):
        f = max(f - g_oracle(f, p), 0.5)
        want.append(f)
    got = ts.trajectories[10][:, 20:]
    assert np.max(np.abs(got - np.asarray(want))) < 1e-6


def test_phase3_rho_zero_steps_to_mu(tmp_path):
    s = make_state(np.r_[np.linspace(5, 1.7, 15), 1.8, 1.9, 1.75, 1.8, 1.85][None, :],
                   lam=[15], mu_c=[1.66], rho_c=[0.0], hyper3=Phase3Hyper(sigma_eps=1e-12))
    store = store_of(tmp_path, s)
    ts = predict(store, 2030, n_traj=5)
    assert np.allclose(ts.trajectories[10][:, 20:], 1.66, atol=1e-9)


def test_ar_carryover_constant_distortion(tmp_path):
    # reference built so the last estimated distortion is 0.02
    s = make_state(np.ones((1, 20)), ar=True, hyper2=quiet_hyper(phi=1.0))
    p = s.country_params(0)
    f = [6.0]
    for _ in range(19):
        f.append(f[-1] - g_oracle(f[-1], p) - 0.02)
    s.tfr = np.array([f])
    store = store_of(tmp_path, s)
    ts = predict(store, 2025, n_traj=8)
    traj = ts.trajectories[10]
    fut = traj[:, 19:]
    u = (fut[:, :-1] - fut[:, 1:]) - dl_decrement(fut[:, :-1], p.delta1, p.delta3, p.delta4,
                                                    p.Uc, p.dc)
    assert np.allclose(u, 0.02, atol=1e-7)


def test_phi_zero_equals_ar_off_bitwise(tmp_path):
    f = np.vstack([np.linspace(6.5, 3.0, 25), np.linspace(5.0, 2.1, 25)])
    off = make_state(f, ar=False)
    on = make_state(f, ar=True, hyper2=Phase2Hyper(phi=0.0))
    a = predict(store_of(tmp_path, off, name="off"), 2070, n_traj=40)
    b = predict(store_of(tmp_path, on, name="on"), 2070, n_traj=40)
    for c in a.trajectories:
        assert np.array_equal(a.trajectories[c], b.trajectories[c])


def test_floor_and_phase_switch(tmp_path):
    s = make_state(np.linspace(3.0, 1.6, 20)[None, :], hyper2=Phase2Hyper(sigma0=0.3))
    ts = predict(store_of(tmp_path, s), 2100, n_traj=40)
    assert ts.trajectories[10].min() >= 0.5


def test_predict_errors(tmp_path):
    s = make_state(np.linspace(6, 3, 10)[None, :])
    store = store_of(tmp_path, s, rows=5)
    with pytest.raises(ValueError, match="burnin"):
        predict(store, 2050, burnin=5, n_traj=2)
    with pytest.raises(ConfigurationError):
        predict(store, 2050, n_traj=2, uncertainty=True)
    with pytest.raises(ValueError, match="only 10"):
        predict(store, 2050, n_traj=11)


def test_outputs_written_and_reloaded(tmp_path):
    s = make_state(np.vstack([np.linspace(6, 3, 12), np.linspace(4, 2.2, 12)]), uncertainty=True)
    store = store_of(tmp_path, s, rows=30)
    ts = predict(store, 2030, burnin=10, n_traj=20)
    d = store.root / "predictions"
    for c in (10, 20):
        fut = pd.read_csv(d / f"{c}.csv")
        assert fut.shape == (20, 2030 - 2001)
        assert (d / f"{c}_summary.csv").exists()
    back = load_predictions(store)
    for c in (10, 20):
        np.testing.assert_allclose(back.trajectories[c], ts.trajectories[c], rtol=1e-9)
    # 40 pooled post-burn-in rows, 20 trajectories -> thin 2
    thinned = store.root / "thinned_mcmc_2_10"
    assert (thinned / "mc1" / "sigma0.txt").exists()
    assert (thinned / "phaseIII" / "mc1" / "sigma.eps.txt").exists()
    assert np.loadtxt(thinned / "mc1" / "sigma0.txt").shape == (20,)
