import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wasep.action import (HolonomicMeasure, InvalidPathError, action, action_report,
                          constant_path, convex_hull_gap, dual_functional, fisher_functional,
                          fisher_gradient, holonomic_rate, path_from_densities, w_hat,
                          write_records)
from wasep.experiments import random_density_path, random_test_field
from wasep.fields import FieldSpec, field_from_preset
from wasep.hydro import DensityField, DensityPath, HydroGrid, evolve, fermi_profile, find_periodic_solution

TRAVELING = {"preset": "cos_potential", "amplitude": 0.5,
             "perturbation": {"amplitude": 1.0, "period": 0.1}}


@settings(max_examples=10)
@given(st.floats(0.2, 0.8), st.floats(-3, 3), st.sampled_from(["constant", "sine", "cos_potential"]),
       st.integers(0, 2**31))
def test_hydrodynamic_paths_have_zero_action(m, E, preset, seed):
    rng = np.random.default_rng(seed)
    key = "value" if preset == "constant" else "amplitude"
    fs = field_from_preset({"preset": preset, key: E})
    M = 32
    x = np.arange(M) / M
    bump = sum(rng.normal() * np.cos(2 * np.pi * k * x + rng.uniform(0, 6)) for k in (1, 2, 3))
    rho0 = m + 0.5 * min(m, 1 - m) * bump / np.abs(bump).max()
    path = evolve(DensityField(rho0), fs, 0.05)
    assert abs(action(path, fs)) < 1e-8


def test_action_of_constant_path():
    # (jbar - sigma E)^2 / (4 sigma) per unit time and volume
    path = constant_path(0.5, [1.0], 2.0)
    assert action(path, FieldSpec.zero(1)) == pytest.approx(2.0 * 1.0 / (4 * 0.25), rel=1e-14)
    assert action(constant_path(0.5, [0.25], 2.0), FieldSpec.constant([1.0])) == pytest.approx(0.0, abs=1e-15)
    assert action(constant_path(0.3, [0.21, -0.42], 1.0, M=8, d=2),
                  FieldSpec.constant([1.0, -2.0])) == pytest.approx(0.0, abs=1e-15)


def test_action_horizon_mismatch_and_invalid_path():
    path = constant_path(0.5, [1.0], 1.0)
    with pytest.raises(ValueError):
        action(path, FieldSpec.zero(1), T=2.0)
    bad = DensityPath(path.times, path.rho, path.j + np.linspace(0, 1, 16)[None, :, None], 1)
    with pytest.raises(InvalidPathError):
        action(bad, FieldSpec.zero(1))


def test_infinite_action_sentinel():
    # empty lattice carrying a current
    assert action(constant_path(0.0, [1.0], 1.0), FieldSpec.zero(1)) == float("inf")
    assert action(constant_path(0.0, [0.0], 1.0), FieldSpec.zero(1)) == 0.0


def test_action_report_fields(tmp_path):
    path = random_density_path(np.random.default_rng(1))
    rec = action_report(path, FieldSpec.constant([1.0]))
    assert set(rec) >= {"functional", "value", "mass", "grid", "tolerances", "finite",
                        "grad_rho_norm", "current_norm"}
    assert rec["finite"] and rec["value"] > 0
    write_records([rec], tmp_path / "a.json")
    assert json.load(open(tmp_path / "a.json"))[0]["value"] == pytest.approx(rec["value"])


def test_path_from_densities_satisfies_continuity():
    path = random_density_path(np.random.default_rng(3), M=16, d=2, n_steps=6)
    assert path.continuity_residual().max() < 1e-10
    with pytest.raises(InvalidPathError):
        path_from_densities(np.array([[0.5, 0.5], [0.4, 0.5]]), [0.0, 1.0])


# --------------------------------------------------------------------------
# holonomic measures


def test_holonomic_rate_of_periodic_solution_is_zero():
    fs = field_from_preset(TRAVELING)
    sol = find_periodic_solution(0.5, 0.1, fs, tol=1e-12, M=64)
    P = HolonomicMeasure(sol.path)
    assert holonomic_rate(P, fs) < 1e-8
    assert P.mean_current_divergence() < 1e-8


def test_holonomic_rate_is_time_shift_invariant():
    fs = field_from_preset(TRAVELING)
    sol = find_periodic_solution(0.5, 0.1, fs, tol=1e-12, M=32)
    # off-equation periodic path: same densities, extra constant current
    p = DensityPath(sol.path.times, sol.path.rho, sol.path.j + 0.3, 1)
    shifted = p.shifted(7)
    static = FieldSpec.constant([1.0])
    assert holonomic_rate(shifted, static) == pytest.approx(holonomic_rate(p, static), rel=1e-12)


def test_holonomic_rate_constant_path_formula():
    P = HolonomicMeasure(constant_path(0.4, [0.7], 3.0))
    s = 0.24
    assert holonomic_rate(P, FieldSpec.constant([2.0])) == pytest.approx((0.7 - 2 * s) ** 2 / (4 * s))
    assert np.allclose(P.mean_current(), 0.7)


def test_holonomic_measure_requires_periodicity():
    path = random_density_path(np.random.default_rng(0), T=0.37, n_steps=10)
    path = path_from_densities(np.vstack([path.rho[:-1], path.rho[:1]]), path.times)
    HolonomicMeasure(path)
    with pytest.raises(ValueError):
        HolonomicMeasure(DensityPath(path.times, np.vstack([path.rho[:-1], path.rho[1][None]]),
                                     path.j, 1))


# --------------------------------------------------------------------------
# duality


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.integers(1, 2))
def test_dual_bounded_by_action_and_attained(seed, d):
    rng = np.random.default_rng(seed)
    path = random_density_path(rng, M=16 if d == 1 else 8, d=d, n_steps=8)
    fs = FieldSpec.constant(rng.normal(size=d))
    A = action(path, fs)
    for _ in range(5):
        w = random_test_field(rng, path, scale=rng.uniform(0.1, 5.0))
        assert path.T * dual_functional(path, w, fs) <= A + 1e-8
    best = path.T * dual_functional(path, w_hat(path, fs), fs)
    assert best == pytest.approx(A, rel=1e-6)


def test_dual_zero_field_and_callable():
    path = random_density_path(np.random.default_rng(4))
    fs = FieldSpec.zero(1)
    assert dual_functional(path, np.zeros_like(path.j), fs) == 0.0
    assert dual_functional(path, lambda t, x: np.zeros_like(x), fs) == 0.0
    const = dual_functional(path, lambda t, x: np.ones_like(x), fs)
    assert const == pytest.approx(dual_functional(path, np.ones_like(path.j), fs))
    with pytest.raises(ValueError):
        dual_functional(path, np.zeros(3), fs)


# --------------------------------------------------------------------------
# Fisher-type functional


def test_fisher_vanishes_on_constant_and_fermi_profiles():
    assert fisher_functional(np.full(32, 0.4), None, m=0.4) == 0.0
    U = lambda x: 2.0 * np.cos(2 * np.pi * x[..., 0])
    prof = fermi_profile(U, 0.3, 256)
    # the discrete functional vanishes up to the second-order consistency error
    assert fisher_functional(prof, U, m=0.3) < 1e-4
    assert fisher_functional(prof, U, m=0.3) < 1e-2 * fisher_functional(np.full(256, 0.3), U)


def test_fisher_sine_profile_closed_form():
    # rho = 1/2 + a sin(2 pi x) with U = 0, compared with adaptive quadrature
    M, a = 2048, 0.2
    x = np.arange(M) / M
    rho = 0.5 + a * np.sin(2 * np.pi * x)
    from scipy.integrate import quad
    exact = quad(lambda y: (2 * np.pi * a * np.cos(2 * np.pi * y)) ** 2
                 / (4 * (0.25 - a**2 * np.sin(2 * np.pi * y) ** 2)), 0, 1)[0]
    assert fisher_functional(rho, None, m=0.5) == pytest.approx(exact, rel=1e-5)


def test_fisher_mass_mismatch_rejected():
    with pytest.raises(ValueError):
        fisher_functional(np.full(8, 0.4), None, m=0.5)


def test_fisher_gradient_matches_finite_differences():
    grid = HydroGrid(1, 16)
    rng = np.random.default_rng(0)
    rho = 0.5 + 0.2 * rng.uniform(-1, 1, 16)
    u = np.cos(2 * np.pi * grid.nodes()[:, 0])
    _, g = fisher_gradient(rho, u, grid)
    h = 1e-6
    fd = np.array([(fisher_gradient(rho + h * e, u, grid)[0] - fisher_gradient(rho - h * e, u, grid)[0])
                   / (2 * h) for e in np.eye(16)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_convex_hull_gap_is_zero_for_flat_potential():
    rho = 0.5 + 0.2 * np.sin(2 * np.pi * np.arange(32) / 32)
    est = convex_hull_gap(rho, None, 0.5, n_starts=4, n_iter=100)
    assert est.value <= est.fisher
    assert est.gap == pytest.approx(0.0, abs=1e-9 * max(1.0, est.fisher))


def test_convex_hull_estimate_is_feasible():
    U = lambda x: 3.0 * np.cos(2 * np.pi * x[..., 0])
    rho = np.full(32, 0.5)
    est = convex_hull_gap(rho, U, 0.5, n_starts=4, n_iter=200, seed=1)
    assert 0.0 <= est.value <= est.fisher
    assert np.allclose(est.weights @ est.components, rho, atol=1e-12)
    assert est.weights.sum() == pytest.approx(1.0)
