import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from wasep.currents import (BinSpec, DiscreteVectorField, FourierCurrent, LevelTwoAccumulator,
                            beckmann_flow, continuity_residual, exact_site_values,
                            integrated_current, jump_counts, level_two_measure, net_flow,
                            periodize, sobolev_norm, time_averaged_pair)
from wasep.fields import FieldSpec, bond_line_integrals, field_from_preset
from wasep.lattice import Configuration, TorusGeometry, pair_density
from wasep.simulator import Trajectory, simulate


def _traj(d=1, N=16, K=None, T=0.2, seed=0, field=None):
    g = TorusGeometry(d, N)
    K = g.n_sites // 2 if K is None else K
    c = Configuration.random(g, K, rng=seed)
    fs = field or field_from_preset({"preset": "sine", "amplitude": 2.0}, d)
    return simulate(c, T, fs, seed)


# --------------------------------------------------------------------------
# discrete vector fields


def test_vector_field_must_be_antisymmetric():
    g = TorusGeometry(1, 4)
    with pytest.raises(ValueError):
        DiscreteVectorField(g, np.ones(g.n_bonds))


def test_divergence_of_unit_flow():
    g = TorusGeometry(1, 4)
    W = np.zeros(g.n_bonds, dtype=int)
    b = g.find_bond(0, 1)
    W[b], W[g.bond_reverse[b]] = 1, -1
    div = DiscreteVectorField(g, W).divergence()
    assert list(div) == [1, -1, 0, 0]


def test_flow_csv_export(tmp_path):
    g = TorusGeometry(2, 3)
    W = beckmann_flow(Configuration(g, [1] + [0] * 8), Configuration(g, [0] * 8 + [1]))
    W.to_csv(tmp_path / "w.csv")
    rows = list(csv.DictReader(open(tmp_path / "w.csv")))
    assert len(rows) == g.n_bonds // 2
    assert sum(abs(int(r["value"])) for r in rows) == W.half_total_variation()


# --------------------------------------------------------------------------
# jump counts and integrated current


def test_jump_counts_examples():
    g = TorusGeometry(1, 6)
    c = Configuration.random(g, 3, rng=0)
    empty = Trajectory(c, np.empty(0), np.empty(0, dtype=np.int64), 1.0)
    assert not jump_counts(empty, 0.0, 1.0).any()
    occ = np.zeros(6, dtype=int)
    occ[2] = 1
    b = g.find_bond(2, 3)
    one = Trajectory(Configuration(g, occ), np.array([0.4]), np.array([b]), 1.0)
    counts = jump_counts(one, 0.0, 1.0)
    assert counts[b] == 1 and counts.sum() == 1
    assert jump_counts(one, 0.4, 1.0).sum() == 0


@given(st.integers(0, 2**16), st.floats(0.05, 0.45), st.floats(0.55, 0.95))
def test_jump_counts_additive(seed, a, b):
    traj = _traj(N=8, T=0.1, seed=seed)
    s, t = a * 0.1, b * 0.1
    total = jump_counts(traj, 0.0, traj.T)
    assert np.array_equal(total, jump_counts(traj, 0.0, s) + jump_counts(traj, s, t)
                          + jump_counts(traj, t, traj.T))
    assert (total >= 0).all()


def test_integrated_current_examples():
    g = TorusGeometry(2, 4)
    occ = np.zeros(16, dtype=int)
    occ[5] = 1
    b = g.bond_index(5, 0)
    traj = Trajectory(Configuration(g, occ), np.array([0.5]), np.array([b]), 1.0)
    F = FieldSpec.constant([1.0, 0.0]).E
    assert integrated_current(traj, 0.0, F) == 0.0
    assert integrated_current(traj, 1.0, F) == pytest.approx(1 / 16 * 1 / 4, rel=1e-14)
    with pytest.raises(ValueError):
        integrated_current(traj, 2.0, F)


@pytest.mark.parametrize("d,N", [(1, 32), (2, 8)])
def test_gradient_current_equals_density_increment(d, N):
    traj = _traj(d, N, T=0.3, seed=4)
    f = lambda x: np.sin(2 * np.pi * x[..., 0]) + np.cos(2 * np.pi * x[..., -1]) ** 2

    def gradf(x):
        out = np.zeros(np.shape(x))
        out[..., 0] += 2 * np.pi * np.cos(2 * np.pi * x[..., 0])
        out[..., -1] += -2 * np.pi * np.sin(4 * np.pi * x[..., -1])
        return out

    for t in (0.1, 0.3):
        inc = pair_density(traj.configuration_at(t), f) - pair_density(traj.initial, f)
        assert integrated_current(traj, t, gradf) == pytest.approx(inc, abs=1e-11)


# --------------------------------------------------------------------------
# Beckmann flows


def test_beckmann_trivial_and_mismatch():
    g = TorusGeometry(2, 4)
    c = Configuration.random(g, 5, rng=0)
    assert not beckmann_flow(c, c).values.any()
    with pytest.raises(ValueError):
        beckmann_flow(c, Configuration.random(g, 6, rng=0))


def _min_cost_flow(eta, xi):
    """LP oracle: minimal sum of |W| over unordered bonds with div W = eta - xi."""
    g = eta.geometry
    fwd = g.forward_bonds
    n = fwd.size
    A = np.zeros((g.n_sites, 2 * n))
    for i, b in enumerate(fwd):
        x, y = g.bond_source[b], g.bond_target[b]
        A[x, i] += 1
        A[y, i] -= 1
        A[x, n + i] -= 1
        A[y, n + i] += 1
    rhs = eta.occupancy.astype(float) - xi.occupancy
    res = linprog(np.ones(2 * n), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    return res.fun


def test_beckmann_four_site_example():
    g = TorusGeometry(1, 4)
    eta, xi = Configuration(g, [1, 0, 0, 0]), Configuration(g, [0, 1, 0, 0])
    W = beckmann_flow(eta, xi)
    b = g.find_bond(0, 1)
    assert W[b] == 1 and W[g.bond_reverse[b]] == -1
    assert np.count_nonzero(W.values) == 2
    assert list(W.divergence()) == [1, -1, 0, 0]
    assert W.half_total_variation() == _min_cost_flow(eta, xi) == 1


def test_beckmann_single_exchange():
    g = TorusGeometry(2, 5)
    rng = np.random.default_rng(1)
    for _ in range(20):
        eta = Configuration.random(g, 9, rng=rng)
        movable = [b for b in range(g.n_bonds)
                   if eta.occupancy[g.bond_source[b]] == 1 and eta.occupancy[g.bond_target[b]] == 0]
        b = movable[rng.integers(len(movable))]
        occ = eta.occupancy.copy()
        occ[g.bond_source[b]], occ[g.bond_target[b]] = 0, 1
        W = beckmann_flow(eta, Configuration(g, occ))
        expected = np.zeros(g.n_bonds, dtype=int)
        expected[b], expected[g.bond_reverse[b]] = 1, -1
        assert np.array_equal(W.values, expected)


@given(st.integers(1, 2), st.integers(2, 10), st.integers(0, 2**20))
def test_beckmann_divergence_and_bound(d, N, seed):
    g = TorusGeometry(d, N)
    rng = np.random.default_rng(seed)
    K = int(rng.integers(0, g.n_sites + 1))
    eta, xi = Configuration.random(g, K, rng=rng), Configuration.random(g, K, rng=rng)
    W = beckmann_flow(eta, xi)
    assert W.values.dtype.kind == "i"
    assert np.array_equal(W.divergence(), eta.occupancy.astype(int) - xi.occupancy)
    assert W.half_total_variation() <= d * N ** (d + 1)


def test_beckmann_feasible_against_lp_oracle():
    g = TorusGeometry(2, 4)
    rng = np.random.default_rng(7)
    for _ in range(10):
        eta, xi = Configuration.random(g, 6, rng=rng), Configuration.random(g, 6, rng=rng)
        assert beckmann_flow(eta, xi).half_total_variation() >= _min_cost_flow(eta, xi) - 1e-9


# --------------------------------------------------------------------------
# periodization and continuity


def test_periodize_closed_path_has_no_correction():
    g = TorusGeometry(1, 6)
    occ = np.zeros(6, dtype=int)
    occ[0] = 1
    bonds = [g.find_bond(0, 1), g.find_bond(1, 0)]
    traj = Trajectory(Configuration(g, occ), np.array([0.2, 0.6]), np.array(bonds), 1.0)
    assert not periodize(traj).correction.values.any()


def test_periodize_single_step_right():
    g = TorusGeometry(1, 6)
    occ = np.zeros(6, dtype=int)
    occ[2] = 1
    b = g.find_bond(2, 3)
    traj = Trajectory(Configuration(g, occ), np.array([0.5]), np.array([b]), 1.0)
    P = periodize(traj)
    rev = g.find_bond(3, 2)
    assert P.correction[rev] == 1 and np.count_nonzero(P.correction.values) == 2
    assert not P.period_flow.values.any()
    F = FieldSpec.constant([1.0]).E
    assert P.discrepancy(F) == pytest.approx(1 / 36)


@pytest.mark.parametrize("d,N", [(1, 16), (2, 6)])
def test_periodized_continuity_across_period(d, N):
    traj = _traj(d, N, T=0.05, seed=2)
    P = periodize(traj)
    f = lambda x: np.cos(2 * np.pi * x[..., 0]) + np.sin(2 * np.pi * x[..., -1])
    fv = f(traj.geometry.positions)
    gradN = fv[traj.geometry.bond_target] - fv[traj.geometry.bond_source]
    T = traj.T
    for s, t in [(T - 0.01, T + 0.01), (0.3 * T, 2.7 * T), (T, 3 * T)]:
        dens = np.dot(P.occupancy_at(t) - P.occupancy_at(s), fv) / traj.geometry.n_sites
        assert abs(dens - P.net_flow(s, t).pair(gradN)) <= 1e-12


def test_periodize_rejects_long_period():
    traj = _traj(T=0.1)
    with pytest.raises(ValueError):
        periodize(traj, 0.2)


def test_continuity_residual_constant_function():
    traj = _traj(T=0.1)
    assert continuity_residual(traj, lambda x: np.ones(len(x)), 0.0, traj.T) == 0.0


@given(st.integers(0, 2**16))
def test_continuity_residual_simulated(seed):
    traj = _traj(N=24, T=0.05, seed=seed)
    f = lambda x: np.cos(2 * np.pi * x[..., 0])
    for s, t in [(0.0, traj.T), (0.01, 0.04)]:
        assert abs(continuity_residual(traj, f, s, t)) <= 1e-9
        gradf = lambda x: -2 * np.pi * np.sin(2 * np.pi * x)
        assert abs(continuity_residual(traj, f, s, t, grad=gradf)) <= 1e-9


def test_continuity_residual_exact_rational():
    g = TorusGeometry(1, 5)
    occ = np.array([1, 0, 1, 0, 0])
    bonds = np.array([g.find_bond(0, 1), g.find_bond(2, 3)])
    traj = Trajectory(Configuration(g, occ), np.array([Fraction(1, 3), Fraction(2, 3)],
                                                      dtype=float), bonds, 1.0)
    f = exact_site_values(lambda x: x[..., 0] ** 2 - 0.25 * x[..., 0], g)
    assert continuity_residual(traj, f, 0.0, 1.0) == 0
    assert isinstance(continuity_residual(traj, f, 0.0, 1.0), Fraction)


# --------------------------------------------------------------------------
# Fourier tables and Sobolev norms


def test_sobolev_norm_examples():
    J = FourierCurrent.zeros(2, 3)
    assert sobolev_norm(J, 2.5) == 0.0
    c = 1.7
    assert sobolev_norm(J.with_coefficient(0, (0, 0), c), 3.0) == pytest.approx(c)
    n = (1, -2)
    v = 0.3 - 0.4j
    single = J.with_coefficient(1, n, v)
    expected = abs(v) * (1 + 4 * np.pi**2 * 5) ** (-1.5)
    assert sobolev_norm(single, 3.0) == pytest.approx(expected, rel=1e-14)


@given(st.integers(0, 2**16), st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_sobolev_norm_monotone_in_p(seed, p, q):
    rng = np.random.default_rng(seed)
    J = FourierCurrent(1, 4, rng.normal(size=(1, 9)) + 1j * rng.normal(size=(1, 9)))
    lo, hi = sorted((p, q))
    assert sobolev_norm(J, lo) >= sobolev_norm(J, hi) - 1e-15


@pytest.mark.parametrize("d,N", [(1, 16), (2, 8)])
def test_fourier_table_matches_direct_line_integrals(d, N):
    traj = _traj(d, N, T=0.05, seed=5)
    W = net_flow(traj, 0.0, traj.T)
    J = FourierCurrent.from_flow(W)
    assert J.is_conjugate_symmetric()
    g = traj.geometry
    rng = np.random.default_rng(0)
    for _ in range(4):
        k = int(rng.integers(d))
        n = rng.integers(-N // 2, N // 2 + 1, size=d)

        def part(fn):
            def H(x):
                out = np.zeros(np.shape(x))
                out[..., k] = fn(2 * np.pi * (np.asarray(x) @ n))
                return out
            return H
        direct = W.pair(bond_line_integrals(part(np.cos), g)) + 1j * W.pair(
            bond_line_integrals(part(np.sin), g))
        assert J.coefficient(k, n) == pytest.approx(direct, abs=1e-12)
    e = np.zeros(d)
    e[0] = 1
    assert J.coefficient(0, np.zeros(d, dtype=int)).real == pytest.approx(
        integrated_current(traj, traj.T, FieldSpec.constant(e).E), abs=1e-14)


def test_fourier_json_export(tmp_path):
    J = FourierCurrent.from_flow(net_flow(_traj(T=0.02), 0.0, 0.02), n_max=3)
    recs = J.to_json(tmp_path / "j.json")
    back = json.load(open(tmp_path / "j.json"))
    assert len(back) == len(recs) == 7
    assert set(back[0]) == {"k", "n", "re", "im"}


# --------------------------------------------------------------------------
# time averages and level-two measures


def test_time_averaged_pair_frozen():
    g = TorusGeometry(1, 8)
    c = Configuration.random(g, 3, rng=0)
    traj = Trajectory(c, np.empty(0), np.empty(0, dtype=np.int64), 2.0)
    tap = time_averaged_pair(traj)
    assert np.allclose(tap.density.ravel(), c.occupancy / 8)
    assert tap.pair_current(FieldSpec.constant([1.0]).E) == 0.0


def test_time_averaged_pair_single_jump():
    g = TorusGeometry(1, 8)
    occ = np.zeros(8, dtype=int)
    occ[1] = 1
    T = 2.0
    traj = Trajectory(Configuration(g, occ), np.array([T / 2]), np.array([g.find_bond(1, 2)]), T)
    tap = time_averaged_pair(traj)
    F = FieldSpec.constant([1.0]).E
    assert tap.pair_current(F) == pytest.approx((1 / T) * (1 / 8) * (1 / 8))
    assert tap.density.ravel()[1] == pytest.approx(0.5 / 8)
    assert tap.density.ravel()[2] == pytest.approx(0.5 / 8)


@given(st.integers(1, 2), st.integers(0, 2**16))
def test_periodization_error_bound(d, seed):
    traj = _traj(d, 8 if d == 1 else 5, T=0.05, seed=seed)
    tap = time_averaged_pair(traj)
    F = field_from_preset({"preset": "sine", "amplitude": 3.0}, d).E
    sup = 3.0
    assert abs(tap.pair_error(F)) * tap.T <= d * sup + 1e-12


def test_level_two_examples():
    g = TorusGeometry(1, 8)
    c = Configuration(g, [1, 1, 0, 0, 0, 0, 0, 0])
    frozen = Trajectory(c, np.empty(0), np.empty(0, dtype=np.int64), 1.0)
    m = level_two_measure(frozen, bins=BinSpec(2, 0.0))
    assert m.weights.tolist() == [1.0]
    b = g.find_bond(1, 2)
    c2 = Configuration(g, [1, 1, 1, 1, 0, 0, 0, 0])
    half = Trajectory(c2, np.array([0.5]), np.array([g.find_bond(3, 4)]), 1.0)
    m2 = level_two_measure(half, bins=BinSpec(2, 0.0))
    assert sorted(m2.weights.tolist()) == [0.5, 0.5]
    assert b >= 0


@given(st.integers(0, 2**16))
def test_level_two_streaming_matches_batch(seed):
    traj = _traj(N=16, T=0.05, seed=seed)
    bins = BinSpec(4, 0.125)
    batch = level_two_measure(traj, bins=bins)
    acc = LevelTwoAccumulator(traj.initial, bins)
    for lo in range(0, traj.n_events, 37):
        acc.update(traj.times[lo:lo + 37], traj.bonds[lo:lo + 37])
    streamed = acc.finalize(traj.T)
    assert streamed.weights.sum() == pytest.approx(1.0)
    assert np.allclose(np.sort(streamed.weights), np.sort(batch.weights), atol=1e-12)
