import math

import numpy as np
import pytest

from conftest import OMEGA, quad_voltage
from fibertrap.dynamics import (
    KERNELS,
    FieldCache,
    InsufficientWindow,
    IntegratorSettings,
    IonLost,
    integrate,
    mc_map,
    micromotion_velocity,
    secular_frequency_from_trajectory,
    steady_state,
    steady_state_rms,
)
from fibertrap.fields import SR88, DriveConfig, IdealQuadrupole, secular_spectrum

CYCLE = 2 * math.pi / OMEGA


@pytest.fixture(scope="module")
def zquad():
    """Ideal quadrupole with a uniform-field electrode along the strong axis."""
    return IdealQuadrupole(center=(0.0, 0.0, 5e-4), r0=5e-4, rf_weights=(-0.5, -0.5, 1.0),
                           dc={"DCZ": {"gradient": (0.0, 0.0, 1.0)}})


@pytest.fixture(scope="module")
def trap_cache(basis, node):
    return FieldCache(basis, node)


def held_displaced(zquad, q, d):
    """Drive that holds the ion a distance ``d`` above the quadrupole center."""
    wz = OMEGA / 2 * q / math.sqrt(2)
    e = SR88.mass * wz**2 * d / SR88.charge
    # DCZ potential u_z per volt gives E_z = -1 V/m per volt
    return DriveConfig(omega_rf=OMEGA, v1=quad_voltage(q), dc_voltages={"DCZ": -e})


def test_free_damped_decay(zquad):
    gamma = 2 * math.pi * 20e3
    dr = DriveConfig(omega_rf=OMEGA, v1=0.0)
    cache = FieldCache(zquad, zquad.center, order=2)
    v0 = np.array([3.0, -1.0, 2.0])
    tr = integrate(zquad, dr, SR88, (zquad.center, v0), gamma, 200 * CYCLE, cache=cache)
    expected = v0 * np.exp(-gamma * tr.t[-1])
    np.testing.assert_allclose(tr.velocities[-1], expected, rtol=1e-2)


@pytest.mark.parametrize("q", [0.1, 0.2, 0.3])
def test_mathieu_secular_frequency(zquad, q):
    dr = DriveConfig(omega_rf=OMEGA, v1=quad_voltage(q))
    start = zquad.center + np.array([0, 0, 1e-6])
    tr = integrate(zquad, dr, SR88, (start, np.zeros(3)), 0.0, 400 * CYCLE)
    w = secular_frequency_from_trajectory(tr, (0, 0, 1))
    assert w == pytest.approx(OMEGA / 2 * q / math.sqrt(2), rel=2e-2)
    # agrees with the cycle-averaged curvature of the same field
    ws = secular_spectrum(zquad, dr, SR88, node=zquad.center).secular_frequencies[2]
    assert w == pytest.approx(ws, rel=2e-2)


def test_displaced_micromotion_amplitude(zquad):
    q, d = 0.2, 1e-6
    dr = held_displaced(zquad, q, d)
    tr = steady_state(zquad, dr, SR88, zquad.center)
    assert tr.mean_position[2] - zquad.center[2] == pytest.approx(d, rel=2e-2)
    z = tr.positions[:, 2]
    assert (z.max() - z.min()) / 2 == pytest.approx(q * d / 2, rel=5e-2)
    assert tr.rms_amplitude == pytest.approx(q * d / (2 * math.sqrt(2)), rel=5e-2)
    amp, _ = micromotion_velocity(tr, (0, 0, 1))
    assert amp == pytest.approx(q * d / 2 * OMEGA, rel=5e-2)


def test_micromotion_linear_in_displacement(zquad):
    a1, _ = micromotion_velocity(steady_state(zquad, held_displaced(zquad, 0.2, 1e-6), SR88, zquad.center), (0, 0, 1))
    a2, _ = micromotion_velocity(steady_state(zquad, held_displaced(zquad, 0.2, 2e-6), SR88, zquad.center), (0, 0, 1))
    assert a2 / a1 == pytest.approx(2.0, rel=2e-2)


def test_null_at_node(zquad):
    ref, _ = micromotion_velocity(steady_state(zquad, held_displaced(zquad, 0.2, 1e-6), SR88, zquad.center), (0, 0, 1))
    tr = steady_state(zquad, DriveConfig(omega_rf=OMEGA, v1=quad_voltage(0.2)), SR88, zquad.center)
    amp, _ = micromotion_velocity(tr, (0, 0, 1))
    assert amp < 1e-4 * ref


def test_kernels_agree(zquad):
    if "compiled" not in KERNELS:
        pytest.skip("compiled kernel not built")
    dr = held_displaced(zquad, 0.25, 2e-6)
    cache = FieldCache(zquad, zquad.center)
    init = (zquad.center + np.array([1e-7, -2e-7, 3e-7]), np.array([0.1, 0.0, -0.2]))
    a = integrate(zquad, dr, SR88, init, 1e4, 20 * CYCLE, cache=cache, kernel="python")
    b = integrate(zquad, dr, SR88, init, 1e4, 20 * CYCLE, cache=cache, kernel="compiled")
    np.testing.assert_allclose(a.positions, b.positions, rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(a.velocities, b.velocities, rtol=1e-9, atol=1e-12)


def test_determinism(zquad):
    dr = held_displaced(zquad, 0.2, 1e-6)
    a = steady_state(zquad, dr, SR88, zquad.center, velocity=(0.1, 0.2, 0.0))
    b = steady_state(zquad, dr, SR88, zquad.center, velocity=(0.1, 0.2, 0.0))
    assert np.array_equal(a.positions, b.positions)


def test_ion_lost_errors(zquad):
    with pytest.raises(IonLost):
        integrate(zquad, DriveConfig(omega_rf=OMEGA, v1=quad_voltage(0.2)), SR88, ((0, 0, -1e-6), (0, 0, 0)), 0.0, CYCLE)
    # beyond the first Mathieu stability edge the motion grows without bound
    with pytest.raises(IonLost):
        integrate(zquad, DriveConfig(omega_rf=OMEGA, v1=quad_voltage(1.2)), SR88,
                  (zquad.center + np.array([0, 0, 1e-6]), np.zeros(3)), 0.0, 2000 * CYCLE)


def test_insufficient_window(zquad):
    tr = integrate(zquad, DriveConfig(omega_rf=OMEGA, v1=quad_voltage(0.2)), SR88, (zquad.center, np.zeros(3)), 0.0,
                   5 * CYCLE)
    with pytest.raises(InsufficientWindow):
        micromotion_velocity(tr, (0, 0, 1))


def test_settings_validation():
    with pytest.raises(ValueError):
        IntegratorSettings(steps_per_cycle=50)
    with pytest.raises(ValueError):
        IntegratorSettings(steps_per_cycle=1000, record_stride=7)


def test_trap_cache_accuracy(trap_cache, drive):
    assert trap_cache.boundary_error(drive) < 1e-3
    assert trap_cache.boundary_error(drive.replace(dc_voltages={"DC_XP": 1.0, "DC_YN": -0.5})) < 1e-3


def test_null_drive_at_node(basis, drive, species, node, trap_cache):
    assert steady_state_rms(basis, drive, species, node, cache=trap_cache, reference=node) < 5e-9


def test_step_convergence_at_operating_point(basis, drive, species, node, trap_cache):
    dr = drive.replace(delta=drive.delta * (1 + 5e-5))
    a = steady_state_rms(basis, dr, species, node, cache=trap_cache, reference=node)
    b = steady_state_rms(basis, dr, species, node, cache=trap_cache, reference=node,
                         settings=IntegratorSettings(steps_per_cycle=2000, record_stride=20))
    assert abs(b / a - 1) < 2e-2
    assert 1e-9 < a < 1e-6


@pytest.fixture(scope="module")
def smoke_map(basis, drive, species, node, trap_cache):
    return mc_map(basis, drive, species, (-2e-4, 2e-4), (-math.radians(0.5), math.radians(0.5)), (3, 3), 1, seed=4,
                  node=node, cache=trap_cache)


def test_mc_smoke(smoke_map):
    m = smoke_map
    assert m.rms.shape == (3, 3) and np.all(m.n_ok == 1)
    assert np.all(m.rms >= 0)
    assert np.unravel_index(np.argmin(m.rms), m.rms.shape) == (1, 1)
    # grows away from the center along each axis
    assert m.rms[0, 1] > m.rms[1, 1] < m.rms[2, 1]
    assert m.rms[1, 0] > m.rms[1, 1] < m.rms[1, 2]


def test_mc_theta_mirror_symmetry(smoke_map):
    m = smoke_map
    np.testing.assert_allclose(m.rms[:, 0], m.rms[:, 2], rtol=0.1)


def test_mc_reproducible(basis, drive, species, node, trap_cache, smoke_map):
    again = mc_map(basis, drive, species, (-2e-4, 2e-4), (-math.radians(0.5), math.radians(0.5)), (3, 3), 1, seed=4,
                   node=node, cache=trap_cache)
    assert np.array_equal(again.rms, smoke_map.rms)


def test_mc_axes_must_be_symmetric(basis, drive, species, node, trap_cache):
    with pytest.raises(ValueError):
        mc_map(basis, drive, species, (-1e-4, 2e-4), (-1e-3, 1e-3), (3, 3), 1, node=node, cache=trap_cache)
    with pytest.raises(ValueError):
        mc_map(basis, drive, species, (-1e-4, 1e-4), (-1e-3, 1e-3), (3, 3), 0, node=node, cache=trap_cache)


def test_mc_csv(tmp_path, smoke_map):
    f = tmp_path / "mc.csv"
    smoke_map.write_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0].startswith("delta_rel,theta_rad,rms_m") and len(lines) == 10
