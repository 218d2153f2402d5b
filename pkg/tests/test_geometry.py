import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fibertrap.geometry import (
    Circle,
    ElectrodePatch,
    Ellipse,
    GeometryError,
    PaperTrapParams,
    ResolutionError,
    TrapLayout,
    build_paper_trap,
    contains,
    discretize,
    rectangle,
)


def rf_pad_oracle(x, y, p=PaperTrapParams()):
    a, b = p.rf_major / 2, p.rf_minor / 2
    in_ellipse = (x / a) ** 2 + ((y - p.rf_offset_y) / b) ** 2 <= 1
    out_hole = x**2 + y**2 > (p.ground_diameter / 2 + p.gap) ** 2
    return in_ellipse & out_hole


def test_rf_ellipse_dimensions(layout):
    outer = layout["RF1"].outer.half
    assert outer.a == pytest.approx(2.95e-3)
    assert outer.b == pytest.approx(1.40e-3)
    assert outer.center[1] == pytest.approx(5e-4)


def test_roles_and_split(layout):
    assert len(layout.by_role("RF1")) == 1 and len(layout.by_role("RF2")) == 1
    assert len(layout.by_role("DC")) == 4
    assert len(layout.by_role("GROUND")) == 1


def test_rf_area_against_rasterization(layout):
    h = 1e-6
    p = PaperTrapParams()
    # analytic pad area: ellipse minus the hole (hole lies fully inside)
    exact = math.pi * 2.95e-3 * 1.40e-3 - math.pi * (p.ground_diameter / 2 + p.gap) ** 2
    area = layout["RF1"].area + layout["RF2"].area
    assert area == pytest.approx(exact, rel=1e-12)
    # raster at 1 um pitch over a horizontal strip, compared to the contains() area per strip
    xs = np.arange(-2.95e-3, 2.95e-3, h) + h / 2
    ys = np.arange(-0.9e-3, 1.9e-3, 50e-6)
    total = 0
    for y in ys:
        m = rf_pad_oracle(xs, np.full_like(xs, y))
        got = contains(layout["RF1"], (xs, np.full_like(xs, y))) | contains(layout["RF2"], (xs, np.full_like(xs, y)))
        assert np.array_equal(m, got)
        total += m.sum()
    assert total > 0


def test_contains_matches_oracle_on_grid(layout):
    g = np.arange(-3.2e-3, 3.2e-3, 10e-6)
    x, y = np.meshgrid(g, g + 5e-4)
    x, y = x.ravel(), y.ravel()
    inside = contains(layout["RF1"], (x, y)) | contains(layout["RF2"], (x, y))
    assert np.array_equal(inside, rf_pad_oracle(x, y))


def test_ground_disk_membership(layout):
    gnd = layout["GND"]
    assert contains(gnd, (0.0, 0.0))
    assert not contains(gnd, (0.551e-3, 0.0))
    assert contains(gnd, (0.55e-3, 0.0))  # outer boundary is inside


def test_hole_boundary_excluded():
    p = ElectrodePatch("a", "DC", Circle((0, 0), 1.0), (Circle((0, 0), 0.5),))
    assert not contains(p, (0.5, 0.0))
    assert contains(p, (0.5000001, 0.0))


def test_patches_disjoint_on_grid(layout):
    g = np.arange(-5.5e-3, 5.5e-3, 2e-6)
    for y in np.linspace(-2.5e-3, 3.5e-3, 25):
        hits = sum(contains(p, (g, np.full_like(g, y))).astype(int) for p in layout.patches)
        assert hits.max() <= 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-6e-3, 6e-3), st.floats(-3e-3, 4e-3))
def test_mirror_symmetry(layout, x, y):
    for p in layout.patches:
        if p.role == "DC" and p.id in ("DC_XP", "DC_XN"):
            other = layout["DC_XN" if p.id == "DC_XP" else "DC_XP"]
            assert contains(p, (x, y)) == contains(other, (-x, y))
        else:
            assert contains(p, (x, y)) == contains(p, (-x, y))


def test_zero_gap_tiles_rf_pad():
    lay = build_paper_trap(PaperTrapParams(gap=0.0))
    xs = np.linspace(-2.9e-3, 2.9e-3, 4001)
    for y in np.linspace(-0.85e-3, 1.85e-3, 30):
        yy = np.full_like(xs, y)
        cover = contains(lay["RF1"], (xs, yy)).astype(int) + contains(lay["RF2"], (xs, yy)) + contains(lay["GND"], (xs, yy))
        in_ellipse = (xs / 2.95e-3) ** 2 + ((y - 5e-4) / 1.4e-3) ** 2 <= 1
        assert np.all(cover[in_ellipse] == 1)


def test_via_inside_ground_required():
    with pytest.raises(GeometryError):
        build_paper_trap(PaperTrapParams(via_offset_y=4e-4))


def test_negative_length_rejected():
    with pytest.raises(GeometryError):
        PaperTrapParams(rf_minor=-1.0).validate()


def test_hole_outside_rejected():
    with pytest.raises(GeometryError):
        ElectrodePatch("a", "DC", Circle((0, 0), 1.0), (Circle((2, 0), 0.5),))


def test_overlapping_holes_rejected():
    with pytest.raises(GeometryError):
        ElectrodePatch("a", "DC", Circle((0, 0), 1.0), (Circle((0.1, 0), 0.3), Circle((-0.1, 0), 0.3)))


def test_disk_area_quadrature():
    r = 1e-3
    cells = discretize(ElectrodePatch("d", "DC", Circle((0, 0), r)), r / 100)
    assert cells.total_area == pytest.approx(math.pi * r * r, rel=1e-3)


def test_ellipse_area_quadrature():
    cells = discretize(ElectrodePatch("e", "DC", Ellipse((0, 0), 2e-3, 1e-3)), 1e-5)
    assert cells.total_area == pytest.approx(math.pi * 2e-6, rel=1e-3)


@pytest.mark.parametrize("shape", [Circle((1e-4, 0), 1e-3), Ellipse((0, 2e-4), 2e-3, 7e-4)])
def test_area_convergence_first_order(shape):
    p = ElectrodePatch("s", "DC", shape)
    errs = [abs(discretize(p, h).total_area - shape.area) for h in (1e-4, 5e-5)]
    assert errs[1] <= errs[0] / 2 or errs[1] < 1e-12 * shape.area


def test_too_coarse_raises():
    with pytest.raises(ResolutionError):
        discretize(ElectrodePatch("d", "DC", Circle((0, 0), 1e-3)), 1e-3)


def test_serialization_round_trip(layout):
    again = TrapLayout.loads(layout.dumps())
    assert again.ids == layout.ids
    for p in layout.patches:
        q = again[p.id]
        assert q.role == p.role and q.area == pytest.approx(p.area)


def test_rectangle_helper():
    r = rectangle(0, 0, 2, 1)
    assert r.area == pytest.approx(2.0)
