import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wasep.coupling import (DriftField, coupling_tail_fit, feynman_kac_check, feynman_kac_decay,
                            simulate_coupled, torus_displacement)
from wasep.fields import field_from_preset
from wasep.hydro import DensityField, evolve


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
def test_torus_displacement_is_shortest(x, y):
    d = torus_displacement([x], [y])[0]
    assert -0.5 <= d < 0.5
    assert np.isclose((x + d - y + 0.5) % 1.0, 0.5) or np.isclose((x + d - y) % 1.0, 0.0)


def test_drift_bounds():
    assert DriftField.zero().bound == 0.0
    assert DriftField.constant([3.0, 4.0]).bound == pytest.approx(5.0)
    assert DriftField.sine(2.0).bound == pytest.approx(2.0, rel=1e-3)


def test_identical_starts_couple_at_time_zero():
    run = simulate_coupled([0.3], [0.3], 1.0, DriftField.zero(), n_replicas=5)
    assert np.all(run.tau == 0.0)
    assert np.array_equal(run.X, run.Y)


def test_zero_drift_couples_everything():
    run = simulate_coupled([0.0], [0.5], 3.0, DriftField.zero(), n_replicas=200, seed=1)
    assert run.coupled_fraction == 1.0
    assert np.array_equal(run.X, run.Y)


def test_runs_are_reproducible():
    a = simulate_coupled([0.1], [0.6], 0.2, DriftField.sine(2.0), n_replicas=50, seed=4)
    b = simulate_coupled([0.1], [0.6], 0.2, DriftField.sine(2.0), n_replicas=50, seed=4)
    assert np.array_equal(a.tau, b.tau) and np.array_equal(a.X, b.X)


def test_coupled_components_move_together_in_two_dimensions():
    run = simulate_coupled([0.1, 0.2], [0.5, 0.6], 0.5, DriftField.constant([1.0, -1.0]),
                           n_replicas=300, seed=2)
    done = np.isfinite(run.tau)
    assert done.any()
    assert np.array_equal(run.X[done], run.Y[done])


def test_survival_curve_properties():
    run = simulate_coupled([0.0], [0.5], 0.5, DriftField.sine(2.0), n_replicas=500, seed=3)
    t = np.linspace(0, 0.5, 51)
    s = run.survival(t)
    assert s[0] == 1.0
    assert np.all(np.diff(s) <= 0)


def test_tail_fit_on_exponential_sample(tmp_path):
    rng = np.random.default_rng(0)
    tau = rng.exponential(1 / 3.0, size=20000)
    fit = coupling_tail_fit(tau, np.linspace(0, 2, 201))
    assert fit.rate == pytest.approx(3.0, abs=0.1)
    assert fit.r2 > 0.99
    fit.to_csv(tmp_path / "s.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 201 and set(rows[0]) == {"t", "surviving_fraction", "ci_low", "ci_high", "in_tail"}
    rec = fit.to_json(tmp_path / "f.json")
    assert json.load(open(tmp_path / "f.json"))["lambda"] == pytest.approx(rec["lambda"])


def test_survival_interval_shrinks_with_ensemble_size():
    rng = np.random.default_rng(1)
    w = []
    for n in (2500, 10000):
        fit = coupling_tail_fit(rng.exponential(1.0, n), np.linspace(0, 3, 31))
        w.append(fit.survival_ci[1][5] - fit.survival_ci[0][5])
    assert w[0] / w[1] == pytest.approx(2.0, rel=0.1)


def test_tail_fit_warns_when_everything_coupled_early():
    with pytest.warns(UserWarning, match="coupled before"):
        fit = coupling_tail_fit(np.full(100, 0.01), np.linspace(0.1, 1, 10))
    assert np.isnan(fit.rate)
    with pytest.raises(ValueError):
        coupling_tail_fit(np.array([]), [0.0])


@pytest.mark.slow
def test_coupling_rate_positive_and_drift_comparison():
    """Empirical: a zero drift should couple at least about as fast as a bounded one."""
    t = np.arange(0, 0.6, 0.005)
    rates = {}
    for name, drift in [("zero", DriftField.zero()), ("sine", DriftField.sine(2.0))]:
        run = simulate_coupled([0.0], [0.5], 0.6, drift, n_replicas=4000, seed=5)
        fit = coupling_tail_fit(run, t)
        assert fit.rate > 0 and fit.r2 > 0.98
        rates[name] = fit
    assert rates["zero"].rate >= rates["sine"].rate_ci[0] - 3.0


# --------------------------------------------------------------------------
# Feynman-Kac dual


def test_feynman_kac_uniform_density_stays_uniform():
    res = feynman_kac_check(np.ones(32), DriftField.zero(), 0.05, n_particles=40000)
    assert res.ok
    assert np.allclose(res.pde, 1.0)


def test_feynman_kac_matches_pde_with_drift():
    x = np.arange(64) / 64
    w0 = 1 + 0.8 * np.cos(2 * np.pi * x)
    res = feynman_kac_check(w0, DriftField(field_from_preset({"preset": "sine", "amplitude": 2.0})),
                            0.05, n_particles=60000, seed=2)
    assert res.ok, (res.tv_distance, res.tolerance)


def test_feynman_kac_rejects_bad_density():
    with pytest.raises(ValueError):
        feynman_kac_check(np.full(8, 2.0), DriftField.zero(), 0.1)
    with pytest.raises(ValueError):
        feynman_kac_check(np.ones(8), DriftField.zero(2), 0.1)


def test_feynman_kac_decay_is_monotone():
    x = np.arange(64) / 64
    w1 = 1 + 0.5 * np.cos(2 * np.pi * x)
    w2 = 1 - 0.5 * np.sin(4 * np.pi * x)
    fit = feynman_kac_decay(w1, w2, DriftField(field_from_preset("cos_potential")), 0.1)
    assert np.all(np.diff(fit.distances) <= 1e-15) and fit.rate > 0


def test_gibbs_density_is_stationary_for_linear_equation():
    fs = field_from_preset("cos_potential")
    x = np.arange(128) / 128
    g = np.exp(-fs.U(x[:, None]))
    g /= g.mean()
    out = evolve(DensityField(g, bounded=False), fs, 0.1, store="final", mobility="linear").final
    assert np.abs(out.values - g).max() < 1e-2
