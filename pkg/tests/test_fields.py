import csv
import math

import numpy as np
import pytest

from conftest import OMEGA, quad_voltage
from fibertrap.fields import (
    SR88,
    DriveConfig,
    EvaluationAtPlane,
    FieldBasis,
    UnstableConfiguration,
    find_node,
    pseudopotential,
    rf_field_phasor,
    secular_spectrum,
    write_field_map,
)
from fibertrap.geometry import Circle, ElectrodePatch, TrapLayout

R = 1e-3


def disk_basis(radius=R, max_cell=None, center=(0.0, 0.0)):
    lay = TrapLayout((ElectrodePatch("D", "DC", Circle(center, radius)),))
    return FieldBasis(lay, max_cell or radius / 200, gap_model="ground")


@pytest.fixture(scope="module")
def disk():
    return disk_basis()


def disk_phi(z, r=R):
    return 1 - z / math.sqrt(z * z + r * r)


def disk_ez(z, r=R):
    return r * r / (z * z + r * r) ** 1.5


@pytest.mark.parametrize("z", [2e-4, 5e-4, 1e-3, 3e-3])
def test_disk_on_axis_potential(disk, z):
    assert disk.potential("D", (0, 0, z)) == pytest.approx(disk_phi(z), rel=1e-3)


@pytest.mark.parametrize("z", [2e-4, 5e-4, 1e-3, 3e-3])
def test_disk_on_axis_field(disk, z):
    e = disk.field("D", (0, 0, z))
    assert e[2] == pytest.approx(disk_ez(z), rel=1e-3)
    assert abs(e[0]) < 1e-6 * abs(e[2]) and abs(e[1]) < 1e-6 * abs(e[2])


def test_potential_decays_monotonically(disk):
    zs = np.geomspace(5e-3, 1.0, 30)
    v = disk.potential("D", np.column_stack([np.zeros_like(zs), np.zeros_like(zs), zs]))
    assert np.all(np.diff(v) < 0) and v[-1] < 1e-5


def test_completeness_of_covered_plane():
    # disk + surrounding annulus cover a big disk of radius 40 mm
    big = 40e-3
    lay = TrapLayout((
        ElectrodePatch("in", "DC", Circle((0, 0), 1e-3)),
        ElectrodePatch("out", "DC", Circle((0, 0), big), (Circle((0, 0), 1e-3),)),
    ))
    b = FieldBasis(lay, 2e-5, overrides={"out": 5e-5}, gap_model="ground")
    for p in [(0, 0, 5e-4), (2e-4, -1e-4, 7e-4), (1e-3, 5e-4, 3e-4)]:
        total = b.potential("in", p) + b.potential("out", p)
        assert total == pytest.approx(1.0, abs=1e-3 + p[2] / big)


def test_superposition():
    a = ElectrodePatch("A", "DC", Circle((-1e-3, 0), 5e-4))
    c = ElectrodePatch("C", "DC", Circle((1e-3, 2e-4), 4e-4))
    both = FieldBasis(TrapLayout((a, c)), 2e-5, gap_model="ground")
    only_a = FieldBasis(TrapLayout((a,)), 2e-5, gap_model="ground")
    only_c = FieldBasis(TrapLayout((c,)), 2e-5, gap_model="ground")
    pts = np.array([[0, 0, 5e-4], [3e-4, -2e-4, 1e-3]])
    np.testing.assert_allclose(both.field("A", pts) + both.field("C", pts), only_a.field("A", pts) + only_c.field("C", pts),
                               rtol=1e-12)


def test_scale_invariance():
    s = 3.0
    v1 = disk_basis(R).potential("D", (2e-4, 1e-4, 6e-4))
    v2 = disk_basis(s * R).potential("D", (s * 2e-4, s * 1e-4, s * 6e-4))
    assert v1 == pytest.approx(v2, rel=1e-9)


def test_gradient_consistency(basis):
    rng = np.random.default_rng(1)
    n = 1000
    pts = np.column_stack([rng.uniform(-1e-3, 1e-3, n), rng.uniform(-1e-3, 1.5e-3, n), rng.uniform(1e-4, 2e-3, n)])
    h = 1e-7
    for pid in ("RF1", "RF2", "DC_XP"):
        e = basis.field(pid, pts)
        fd = np.empty_like(e)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            fd[:, k] = -(basis.potential(pid, pts + dp) - basis.potential(pid, pts - dp)) / (2 * h)
        err = np.linalg.norm(fd - e, axis=1) / np.linalg.norm(e, axis=1)
        assert err.max() < 1e-4


def test_x_field_vanishes_on_mirror_plane(basis):
    pts = np.array([[0, y, z] for y in (-5e-4, 0, 3e-4) for z in (2e-4, 6e-4, 1.2e-3)])
    for pid in ("RF1", "RF2", "GND", "DC_YP"):
        e = basis.field(pid, pts)
        # residual is polygonization noise of the curved outlines
        assert np.all(abs(e[:, 0]) < 1e-4 * np.linalg.norm(e, axis=1))


def test_evaluation_at_plane_raises(basis):
    with pytest.raises(EvaluationAtPlane):
        basis.potential("RF1", (0, 0, 0.0))
    with pytest.raises(EvaluationAtPlane):
        basis.field("RF1", (0, 0, -1e-6))


def test_in_phase_phasor_is_real_sum(basis, drive):
    p = np.array([1e-5, -2e-4, 5e-4])
    e = rf_field_phasor(basis, drive, p)
    assert np.all(e.imag == 0)
    np.testing.assert_allclose(e.real, 125 * (basis.field("RF1", p) + basis.field("RF2", p)), rtol=1e-12)


def test_antiphase_phasor_is_difference(basis, drive):
    p = np.array([0.0, -2e-4, 5e-4])
    e = rf_field_phasor(basis, drive.replace(theta=math.pi), p)
    np.testing.assert_allclose(e.real, 125 * (basis.field("RF1", p) - basis.field("RF2", p)), rtol=1e-9, atol=1e-9)


def test_node_is_a_true_null(basis, drive, node):
    e0 = np.linalg.norm(rf_field_phasor(basis, drive, node))
    e1 = np.linalg.norm(rf_field_phasor(basis, drive, node + np.array([0, 1e-5, 0])))
    assert e0 < 1e-6 * e1
    assert e0**2 < 1e-8 * e1**2


def test_node_on_symmetry_plane(node):
    assert abs(node[0]) < 1e-9


def test_node_multistart(basis, drive, node):
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.normal(size=3)
        d *= rng.uniform(0, 2e-4) / np.linalg.norm(d)
        r = find_node(basis, drive, node + d)
        assert np.linalg.norm(r - node) < 1e-7


def test_node_moves_monotonically_with_delta(basis, drive, node):
    ys = []
    guess = (0.0, -3.5e-4, 6e-4)
    for d in np.linspace(1.0, 0.35, 8):
        r = find_node(basis, drive.replace(delta=d), guess)
        ys.append(r[1])
        guess = r
    assert np.all(np.diff(ys) > 0)
    assert ys[-1] - ys[0] > 170e-6


def test_pseudopotential_scaling(basis, drive, species):
    p = np.array([0, -3e-4, 5e-4])
    assert pseudopotential(basis, drive.replace(v1=0.0), species, p) == 0.0
    a = pseudopotential(basis, drive, species, p)
    b = pseudopotential(basis, drive.replace(v1=250.0), species, p)
    assert b == pytest.approx(4 * a, rel=1e-12)
    assert a > 0


def test_default_trap_spectrum_ordering_and_axes(basis, drive, species, node):
    s = secular_spectrum(basis, drive, species, node=node)
    wx, wy, wz = s.secular_frequencies
    assert wz > wx > wy > 0
    ax = np.asarray(s.principal_axes)
    np.testing.assert_allclose(ax @ ax.T, np.eye(3), atol=1e-10)
    assert 25 < math.degrees(abs(s.tilt_angle_yz)) < 35


def test_spectrum_step_convergence(basis, drive, species, node):
    a = secular_spectrum(basis, drive, species, node=node, step=1e-6).secular_frequencies
    b = secular_spectrum(basis, drive, species, node=node, step=5e-7).secular_frequencies
    assert np.all(abs(b / a - 1) < 5e-3)


@pytest.mark.parametrize("q", [0.1, 0.2, 0.3])
def test_quadrupole_spectrum_matches_mathieu(quad, q):
    dr = DriveConfig(omega_rf=OMEGA, v1=quad_voltage(q))
    s = secular_spectrum(quad, dr, SR88, node=quad.center)
    wz = s.secular_frequencies[2]
    assert wz == pytest.approx(OMEGA / 2 * q / math.sqrt(2), rel=1e-2)
    assert abs(s.mathieu_q[2]) == pytest.approx(q, rel=1e-6)


def test_quadrupole_with_dc_curvature(quad):
    q, a = 0.2, 0.005
    vdc = a * SR88.mass * quad.r0**2 * OMEGA**2 / (4 * SR88.charge * 2.0)  # DC1 curvature along z is -2
    dr = DriveConfig(omega_rf=OMEGA, v1=quad_voltage(q), dc_voltages={"DC1": -vdc})
    s = secular_spectrum(quad, dr, SR88, node=quad.center)
    assert s.secular_frequencies[2] == pytest.approx(OMEGA / 2 * math.sqrt(a + q * q / 2), rel=1e-2)


def test_unstable_configuration_raises(quad):
    with pytest.raises(UnstableConfiguration):
        secular_spectrum(quad, DriveConfig(omega_rf=OMEGA, v1=0.0), SR88, node=quad.center)


def test_field_map_export(tmp_path, basis, drive, species):
    pts = np.array([[0, -3e-4, 5e-4], [1e-4, -3e-4, 6e-4]])
    f = tmp_path / "map.csv"
    write_field_map(f, basis, drive, species, pts)
    rows = list(csv.reader(open(f)))
    assert rows[0] == ["x_m", "y_m", "z_m", "Ex_V_m", "Ey_V_m", "Ez_V_m", "Psi_J"]
    assert len(rows) == 3


def test_spectrum_export_is_flat(basis, drive, species, node):
    d = secular_spectrum(basis, drive, species, node=node).as_dict()
    assert all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in d.values())
