import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import constants, integrate

from fibertrap.fields import SR88, UnstableConfiguration
from fibertrap.optics import (
    ChargingModel,
    GaussianBeam,
    calibrate_w0,
    charging_field,
    charging_magnitude,
    displacement_from_field,
    intensity,
    peak_intensity,
    shelving_rate,
    waist_at,
    write_transient,
)


@pytest.fixture
def beam():
    return GaussianBeam(waist_w0=2.5e-6, power=1e-4)


def test_waist_definitions(beam):
    assert waist_at(beam, 0.0) == beam.waist_w0
    assert waist_at(beam, beam.rayleigh_range) == pytest.approx(beam.waist_w0 * math.sqrt(2), rel=1e-14)


def test_calibration_round_trip():
    w0 = calibrate_w0(50e-6, 670e-6)
    b = GaussianBeam(waist_w0=w0)
    assert waist_at(b, 670e-6) == pytest.approx(50e-6, rel=1e-3)
    # small root: a single-mode-like tip waist, far field at the ion
    assert w0 < math.sqrt(670e-6 * 674e-9 / math.pi)
    wl = calibrate_w0(50e-6, 670e-6, branch="large")
    assert waist_at(GaussianBeam(waist_w0=wl), 670e-6) == pytest.approx(50e-6, rel=1e-9)


def test_calibration_unreachable():
    with pytest.raises(ValueError):
        calibrate_w0(1e-6, 670e-6)


def test_peak_and_waist_intensity(beam):
    z = 5e-4
    w = waist_at(beam, z)
    p = np.array([0, 0, z])
    assert intensity(beam, p) == pytest.approx(2 * beam.power / (math.pi * w * w), rel=1e-14)
    assert intensity(beam, p + [w, 0, 0]) == pytest.approx(peak_intensity(beam, z) * math.exp(-2), rel=1e-12)


@pytest.mark.parametrize("z", [0.0, 1e-4, 6.7e-4])
def test_power_conservation(beam, z):
    w = waist_at(beam, z)

    def ring(rho):
        return intensity(beam, np.array([rho, 0.0, z])) * 2 * math.pi * rho

    total, _ = integrate.quad(ring, 0, 8 * w, limit=200)
    assert total == pytest.approx(beam.power, rel=5e-3)


def test_tilted_beam_axis():
    b = GaussianBeam(waist_w0=3e-6, origin=(1e-4, 0, 0), direction=(0, 1, 1))
    s, rho = b.local_coords(np.array([1e-4, 1e-4, 1e-4]))
    assert s == pytest.approx(math.sqrt(2) * 1e-4) and rho == pytest.approx(0, abs=1e-18)


def test_behind_tip_rejected(beam):
    with pytest.raises(ValueError):
        intensity(beam, np.array([0, 0, -1e-6]))


def test_shelving_rate_linear():
    assert shelving_rate(0.0, 3.0) == 0.0
    assert shelving_rate(2.0, 3.0) == pytest.approx(2 * shelving_rate(1.0, 3.0))
    with pytest.raises(ValueError):
        shelving_rate(-1.0, 1.0)


def test_rate_at_initial_offset(beam):
    z = 6.7e-4
    w = waist_at(beam, z)
    ratio = intensity(beam, np.array([3.34 * w, 0, z])) / peak_intensity(beam, z)
    assert ratio == pytest.approx(math.exp(-2 * 3.34**2), rel=1e-12)
    assert 1e-10 < ratio < 3e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e-4), st.floats(0, 2e-3))
def test_transverse_profile_is_exact_gaussian(w0, z):
    b = GaussianBeam(waist_w0=w0, power=1.0)
    w = waist_at(b, z)
    x = np.linspace(-2 * w, 2 * w, 15)
    pts = np.column_stack([x, np.zeros_like(x), np.full_like(x, z)])
    ratio = intensity(b, pts) / peak_intensity(b, z)
    np.testing.assert_allclose(ratio, np.exp(-2 * x**2 / w**2), rtol=1e-12)


def test_charging_before_first_on():
    m = ChargingModel()
    assert charging_magnitude(m, [(1.0, 5.0)], m.power_ref, 0.5) == 0.0


def test_charging_saturation():
    m = ChargingModel()
    assert charging_magnitude(m, [(0.0, 100.0)], m.power_ref, 99.0) == pytest.approx(m.e_max, rel=1e-12)
    assert m.e_max == pytest.approx(10.0)


def test_charging_one_time_constant():
    m = ChargingModel()
    e = charging_magnitude(m, [(2.0, 50.0)], m.power_ref, 2.0 + m.tau_charge)
    assert abs(e - m.e_max * (1 - math.exp(-1))) < 1e-12


def test_discharge_closed_form():
    m = ChargingModel()
    sched = [(0.0, 3.0)]
    e_off = m.e_max * (1 - math.exp(-3.0 / m.tau_charge))
    e = charging_magnitude(m, sched, m.power_ref, 3.0 + m.tau_discharge)
    assert e == pytest.approx(e_off * math.exp(-1), rel=1e-12)


def test_charging_continuity_and_monotone():
    m = ChargingModel()
    sched = [(1.0, 4.0), (6.0, 20.0), (25.0, 26.0)]
    for b in [1.0, 4.0, 6.0, 20.0, 25.0, 26.0]:
        lo = charging_magnitude(m, sched, m.power_ref, b - 1e-9)
        hi = charging_magnitude(m, sched, m.power_ref, b + 1e-9)
        assert abs(hi - lo) < 1e-7
    t = np.linspace(6.0, 20.0, 200)
    assert np.all(np.diff(charging_magnitude(m, sched, m.power_ref, t)) > 0)


def test_charging_power_scaling():
    m = ChargingModel()
    a = charging_magnitude(m, [(0, 10)], m.power_ref, 3.0)
    b = charging_magnitude(m, [(0, 10)], 2 * m.power_ref, 3.0)
    assert b == pytest.approx(2 * a, rel=1e-14)


def test_charging_schedule_validation():
    m = ChargingModel()
    with pytest.raises(ValueError):
        charging_magnitude(m, [(5, 6), (1, 2)], 1e-4, 0.0)
    with pytest.raises(ValueError):
        charging_magnitude(m, [(0, 3), (2, 4)], 1e-4, 0.0)
    with pytest.raises(ValueError):
        ChargingModel(tau_charge=0)


def test_charging_field_direction():
    m = ChargingModel(direction=(0, 3, 4))
    e = charging_field(m, [(0, 10)], m.power_ref, [1.0, 2.0])
    assert e.shape == (2, 3)
    np.testing.assert_allclose(e[0] / np.linalg.norm(e[0]), [0, 0.6, 0.8])


def _spectrum(freqs_hz, axes=np.eye(3)):
    return SimpleNamespace(secular_frequencies=2 * math.pi * np.asarray(freqs_hz), principal_axes=axes)


def test_displacement_arithmetic():
    sp = _spectrum([249.6e3, 170e3, 419e3])
    d = displacement_from_field([0, 10.0, 0], SR88, sp)
    m = 87.9056121 * constants.atomic_mass - constants.m_e  # Sr+ mass
    expected = constants.e * 10.0 / (m * (2 * math.pi * 170e3) ** 2)
    assert d[1] == pytest.approx(expected, rel=1e-4)
    assert d[1] == pytest.approx(9.6e-6, rel=0.01)
    assert d[0] == 0 and d[2] == 0


def test_displacement_linear_and_zero():
    c, s = math.cos(0.5), math.sin(0.5)
    sp = _spectrum([2e5, 1.5e5, 4e5], np.array([[1, 0, 0], [0, c, -s], [0, s, c]]))
    e = np.array([1.0, 2.0, -3.0])
    np.testing.assert_array_equal(displacement_from_field(np.zeros(3), SR88, sp), 0)
    np.testing.assert_allclose(displacement_from_field(2 * e, SR88, sp), 2 * displacement_from_field(e, SR88, sp))


def test_displacement_unstable():
    with pytest.raises(UnstableConfiguration):
        displacement_from_field([1, 0, 0], SR88, _spectrum([1e5, 0.0, 1e5]))


def test_transient_csv(tmp_path):
    m = ChargingModel()
    t = np.linspace(0, 5, 6)
    f = tmp_path / "t.csv"
    write_transient(f, t, charging_field(m, [(0, 3)], m.power_ref, t))
    lines = f.read_text().splitlines()
    assert lines[0] == "t_s,Ex_V_m,Ey_V_m,Ez_V_m" and len(lines) == 7
