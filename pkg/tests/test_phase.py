import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wasep.action import holonomic_rate
from wasep.fields import FieldSpec
from wasep.phase import (TravelingWave, constant_profile_rate, minimize_tw, optimal_speed,
                         phase_scan, stability_threshold, tw_rate, unroll)
from wasep.phase import _reduced


@pytest.mark.parametrize("m,E,jbar,expected", [(0.5, 0.0, 1.0, 1.0), (0.5, 4.0, 1.0, 0.0),
                                               (0.2, 1.0, 0.0, 0.04), (0.5, 2.0, 0.0, 0.25)])
def test_constant_rate_examples(m, E, jbar, expected):
    assert constant_profile_rate(m, E, jbar) == pytest.approx(expected, rel=1e-15, abs=1e-15)


@given(st.floats(0.01, 0.99), st.floats(-20, 20), st.floats(-5, 5))
def test_constant_rate_symmetries(m, E, jbar):
    r = constant_profile_rate(m, E, jbar)
    assert r >= 0
    assert constant_profile_rate(m, -E, -jbar) == pytest.approx(r, rel=1e-12, abs=1e-14)
    assert constant_profile_rate(1 - m, E, jbar) == pytest.approx(r, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("m", [0.0, 1.0, 1.5])
def test_constant_rate_rejects_degenerate_mass(m):
    with pytest.raises(ValueError):
        constant_profile_rate(m, 1.0, 1.0)


@given(st.floats(0.1, 0.9), st.floats(-15, 15), st.floats(-3, 3), st.floats(-2, 2))
def test_flat_wave_rate_equals_constant_rate(m, E, jbar, v):
    wave = TravelingWave.flat(m, jbar, M=32, v=v)
    assert tw_rate(wave, E) == pytest.approx(constant_profile_rate(m, E, jbar), rel=1e-12, abs=1e-14)


def test_static_nonflat_wave_costs_more_without_field():
    wave = TravelingWave.from_fourier(0.5, 0.0, 0.0, [0.2], M=64)
    assert tw_rate(wave, 0.0) > 0.0


def test_wave_touching_boundary_has_infinite_rate():
    wave = TravelingWave.from_fourier(0.5, 0.0, 0.0, [0.5], M=64)
    assert tw_rate(wave, 1.0) == float("inf")
    with pytest.raises(ValueError):
        TravelingWave(np.array([0.2, 0.3]), 0.0, 0.5, 0.0)


@pytest.mark.parametrize("E,jbar,v", [(0.0, 1.0, 0.7), (3.0, 0.5, -1.3), (12.0, 2.0, 2.5)])
def test_lattice_form_equals_action_of_unrolled_path(E, jbar, v):
    wave = TravelingWave.from_fourier(0.5, jbar, v, [0.1, 0.02], [0.05], M=64)
    path = unroll(wave)
    assert path.continuity_residual().max() < 1e-10
    lattice = tw_rate(wave, E, form="lattice")
    assert lattice == pytest.approx(holonomic_rate(path, FieldSpec.constant([E])), abs=1e-8)
    # both forms discretise the same integral
    assert lattice == pytest.approx(tw_rate(wave, E), rel=2e-2)


def test_optimal_speed_minimises_reduced_rate():
    wave = TravelingWave.from_fourier(0.5, 1.0, 0.0, [0.15], [0.05], M=64)
    v = optimal_speed(wave.profile, 0.5, 8.0, 1.0)
    f = lambda u: _reduced(wave.profile, u, 0.5, 8.0, 1.0)
    assert f(v) <= min(f(v + 1e-3), f(v - 1e-3))
    assert optimal_speed(np.full(16, 0.5), 0.5, 8.0, 1.0) == 0.0


def test_reduced_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    rho = 0.5 + 0.1 * rng.uniform(-1, 1, 24)
    val, g = _reduced(rho, 0.4, rho.mean(), 5.0, 1.0, grad=True)
    h = 1e-6
    fd = np.array([(_reduced(rho + h * e, 0.4, rho.mean(), 5.0, 1.0)
                    - _reduced(rho - h * e, 0.4, rho.mean(), 5.0, 1.0)) / (2 * h) for e in np.eye(24)])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("jbar", [0.5, 1.0, 2.0])
def test_no_gap_without_field(jbar):
    res = minimize_tw(0.5, 0.0, jbar, restarts=6, M=64)
    assert abs(res.gap) < 1e-8
    assert res.rate <= res.constant_rate


def test_gap_is_never_negative_and_drift_symmetric():
    for E, jbar in [(5.0, 0.3), (9.0, 1.0)]:
        res = minimize_tw(0.5, E, jbar, restarts=3, M=48)
        assert res.gap >= -1e-10
    # jbar = sigma E costs nothing with the flat profile
    res = minimize_tw(0.5, 20.0, 5.0, restarts=3, M=48)
    assert res.constant_rate == 0.0 and res.rate == 0.0


def test_stability_threshold_closed_form():
    assert stability_threshold(0.5, 0.0) == pytest.approx(4 * np.pi)
    assert stability_threshold(0.5, 1.0) == pytest.approx(4 * np.sqrt(np.pi**2 + 1))


def test_transition_brackets_stability_threshold():
    Estar = stability_threshold(0.5, 0.0)
    below = minimize_tw(0.5, Estar - 0.5, 0.0, restarts=4, M=64)
    above = minimize_tw(0.5, Estar + 2.5, 0.0, restarts=4, M=64)
    assert below.gap < 1e-8 and below.wave.is_flat()
    assert above.relative_gap > 0.01 and not above.wave.is_flat()


def test_phase_scan_table_and_thresholds(tmp_path):
    scan = phase_scan(0.5, [0.0, 10.0, 15.0, 20.0], [0.0, 1.0], restarts=3, M=48,
                      profile_dir=tmp_path)
    tab = scan.gap_table()
    assert tab.shape == (2, 4)
    assert np.all(tab[:, 0] < 1e-8)
    th = scan.thresholds()
    assert th[0]["E_below"] == 10.0 and th[0]["E_above"] == 15.0 and th[0]["up_closed"]
    scan.to_csv(tmp_path / "scan.csv")
    rows = list(csv.DictReader(open(tmp_path / "scan.csv")))
    assert len(rows) == 8 and (tmp_path / rows[0]["profile_file"]).exists()
    scan.thresholds_to_csv(tmp_path / "th.csv")


def test_wave_csv_and_fourier(tmp_path):
    wave = TravelingWave.from_fourier(0.4, 1.0, 0.5, [0.1], [0.05], M=32)
    c = wave.fourier(2)
    assert c[0] == pytest.approx(0.4) and c[1] == pytest.approx(0.05 - 0.025j)
    wave.to_csv(tmp_path / "w.csv")
    rows = list(csv.DictReader(open(tmp_path / "w.csv")))
    assert float(rows[3]["j"]) == pytest.approx(1.0 + 0.5 * (float(rows[3]["rho"]) - 0.4))
