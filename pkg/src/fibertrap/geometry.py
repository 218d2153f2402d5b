"""Planar electrode layout of the surface-electrode point trap.

All lengths are in meters and all electrodes lie in the plane z = 0.
Shapes know how to test membership exactly and how to turn themselves
into polygons; quadrature cells come from clipping a square grid against
the polygonized patch (boundary vertex spacing tied to the cell size so
the area error converges quadratically).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
import numpy as np
import shapely
from shapely.geometry import Polygon

ROLES = ("RF1", "RF2", "DC", "GROUND")


class GeometryError(ValueError):
    """Invalid electrode geometry (``invalid-geometry``)."""


class ResolutionError(ValueError):
    """Discretization produced too few cells (``resolution-too-coarse``)."""


# --------------------------------------------------------------------------
# shapes


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    kind = "circle"

    def contains(self, x, y):
        x0, y0 = self.center
        return (np.asarray(x) - x0) ** 2 + (np.asarray(y) - y0) ** 2 <= self.radius**2

    def interior(self, x, y):
        x0, y0 = self.center
        return (np.asarray(x) - x0) ** 2 + (np.asarray(y) - y0) ** 2 < self.radius**2

    @property
    def area(self):
        return math.pi * self.radius**2

    @property
    def bounds(self):
        x0, y0 = self.center
        r = self.radius
        return (x0 - r, y0 - r, x0 + r, y0 + r)

    def perimeter(self):
        return 2 * math.pi * self.radius

    def to_polygon(self, spacing):
        return Ellipse(self.center, self.radius, self.radius).to_polygon(spacing)

    def params(self):
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse with semi-axes ``a`` (x) and ``b`` (y)."""

    center: tuple[float, float]
    a: float
    b: float

    kind = "ellipse"

    def _rho2(self, x, y):
        x0, y0 = self.center
        return ((np.asarray(x) - x0) / self.a) ** 2 + ((np.asarray(y) - y0) / self.b) ** 2

    def contains(self, x, y):
        return self._rho2(x, y) <= 1.0

    def interior(self, x, y):
        return self._rho2(x, y) < 1.0

    @property
    def area(self):
        return math.pi * self.a * self.b

    @property
    def bounds(self):
        x0, y0 = self.center
        return (x0 - self.a, y0 - self.b, x0 + self.a, y0 + self.b)

    def perimeter(self):
        # Ramanujan's second approximation
        a, b = self.a, self.b
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))

    def _n_vertices(self, spacing):
        return max(64, int(math.ceil(self.perimeter() / spacing)))

    def to_polygon(self, spacing):
        n = self._n_vertices(spacing)
        t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        x0, y0 = self.center
        return Polygon(np.column_stack([x0 + self.a * np.cos(t), y0 + self.b * np.sin(t)]))

    def params(self):
        return {"center": list(self.center), "a": self.a, "b": self.b}


@dataclass(frozen=True)
class HalfEllipse:
    """Half of an axis-aligned ellipse cut by the line y = center_y.

    ``side=+1`` keeps y >= center_y (closed cut), ``side=-1`` keeps
    y < center_y (open cut), so the two halves partition the ellipse.
    """

    center: tuple[float, float]
    a: float
    b: float
    side: int = 1

    kind = "half_ellipse"

    def __post_init__(self):
        if self.side not in (1, -1):
            raise GeometryError("half_ellipse side must be +1 or -1")

    def _half(self, y):
        dy = np.asarray(y) - self.center[1]
        return dy >= 0 if self.side > 0 else dy < 0

    def contains(self, x, y):
        return Ellipse(self.center, self.a, self.b).contains(x, y) & self._half(y)

    def interior(self, x, y):
        dy = np.asarray(y) - self.center[1]
        return Ellipse(self.center, self.a, self.b).interior(x, y) & (self.side * dy > 0)

    @property
    def area(self):
        return 0.5 * math.pi * self.a * self.b

    @property
    def bounds(self):
        x0, y0 = self.center
        if self.side > 0:
            return (x0 - self.a, y0, x0 + self.a, y0 + self.b)
        return (x0 - self.a, y0 - self.b, x0 + self.a, y0)

    def perimeter(self):
        return 0.5 * Ellipse(self.center, self.a, self.b).perimeter() + 2 * self.a

    def to_polygon(self, spacing):
        n = Ellipse(self.center, self.a, self.b)._n_vertices(spacing) // 2
        t = np.linspace(0.0, math.pi, n + 1)
        x0, y0 = self.center
        xs = x0 + self.a * np.cos(t)
        ys = y0 + self.side * self.b * np.sin(t)
        return Polygon(np.column_stack([xs, ys]))

    def params(self):
        return {"center": list(self.center), "a": self.a, "b": self.b, "side": self.side}


@dataclass(frozen=True)
class PolygonShape:
    """Simple polygon, vertices in order (either orientation)."""

    vertices: tuple[tuple[float, float], ...]

    kind = "polygon"

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise GeometryError("polygon needs at least 3 vertices")

    def _crossings(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        v = np.asarray(self.vertices, dtype=float)
        for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
            cond = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cond & (x < xint)
        return inside

    def _on_boundary(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        on = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        v = np.asarray(self.vertices, dtype=float)
        scale = max(np.ptp(v[:, 0]), np.ptp(v[:, 1]))
        tol = 1e-12 * scale
        for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
            cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
            seg = math.hypot(x2 - x1, y2 - y1)
            within = (
                (np.minimum(x1, x2) - tol <= x)
                & (x <= np.maximum(x1, x2) + tol)
                & (np.minimum(y1, y2) - tol <= y)
                & (y <= np.maximum(y1, y2) + tol)
            )
            on |= within & (np.abs(cross) <= tol * seg)
        return on

    def contains(self, x, y):
        return self._crossings(x, y) | self._on_boundary(x, y)

    def interior(self, x, y):
        return self._crossings(x, y) & ~self._on_boundary(x, y)

    @property
    def area(self):
        v = np.asarray(self.vertices, dtype=float)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def bounds(self):
        v = np.asarray(self.vertices, dtype=float)
        return (v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def perimeter(self):
        v = np.asarray(self.vertices, dtype=float)
        return float(np.sum(np.hypot(*(np.roll(v, -1, axis=0) - v).T)))

    def to_polygon(self, spacing):
        return Polygon(self.vertices)

    def params(self):
        return {"vertices": [list(p) for p in self.vertices]}


@dataclass(frozen=True)
class HalfAnnulus:
    """Half-ellipse minus a circle that may straddle the cut line."""

    half: HalfEllipse
    hole: Circle

    kind = "half_annulus"

    def contains(self, x, y):
        return self.half.contains(x, y) & ~self.hole.contains(x, y)

    def interior(self, x, y):
        return self.half.interior(x, y) & ~self.hole.contains(x, y)

    @property
    def area(self):
        r = self.hole.radius
        d = self.half.side * (self.hole.center[1] - self.half.center[1])
        # part of the circle on the kept side of the cut (circular segment)
        if d >= r:
            seg = math.pi * r * r
        elif d <= -r:
            seg = 0.0
        else:
            h = r + d
            seg = r * r * math.acos((r - h) / r) - (r - h) * math.sqrt(2 * r * h - h * h)
        return self.half.area - seg

    @property
    def bounds(self):
        return self.half.bounds

    def perimeter(self):
        return self.half.perimeter() + self.hole.perimeter()

    def to_polygon(self, spacing):
        return self.half.to_polygon(spacing).difference(self.hole.to_polygon(spacing))

    def params(self):
        return {"half": shape_to_dict(self.half), "hole": shape_to_dict(self.hole)}


def rectangle(cx, cy, width, height):
    hw, hh = width / 2, height / 2
    return PolygonShape(((cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)))


SHAPE_KINDS = {
    "circle": Circle,
    "ellipse": Ellipse,
    "half_ellipse": HalfEllipse,
    "half_annulus": HalfAnnulus,
    "polygon": PolygonShape,
}


def shape_from_dict(d):
    kind = d["kind"]
    if kind == "circle":
        return Circle(tuple(d["center"]), float(d["radius"]))
    if kind == "ellipse":
        return Ellipse(tuple(d["center"]), float(d["a"]), float(d["b"]))
    if kind == "half_ellipse":
        return HalfEllipse(tuple(d["center"]), float(d["a"]), float(d["b"]), int(d.get("side", 1)))
    if kind == "half_annulus":
        return HalfAnnulus(shape_from_dict(d["half"]), shape_from_dict(d["hole"]))
    if kind == "polygon":
        return PolygonShape(tuple(tuple(map(float, p)) for p in d["vertices"]))
    raise GeometryError(f"unknown shape kind {kind!r}")


def shape_to_dict(s):
    return {"kind": s.kind, **s.params()}


# --------------------------------------------------------------------------
# patches and layouts


@dataclass(frozen=True)
class ElectrodePatch:
    id: str
    role: str
    outer: object
    holes: tuple = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise GeometryError(f"patch {self.id!r}: unknown role {self.role!r}")
        if not self.outer.area > 0:
            raise GeometryError(f"patch {self.id!r}: outer shape has no area")
        spacing = _default_spacing(self.outer)
        outer_poly = self.outer.to_polygon(spacing)
        hole_polys = [h.to_polygon(spacing) for h in self.holes]
        for i, hp in enumerate(hole_polys):
            if not (outer_poly.contains(hp) and outer_poly.exterior.distance(hp) > 0):
                raise GeometryError(f"patch {self.id!r}: hole {i} not inside outer shape")
            for j in range(i):
                if hp.intersection(hole_polys[j]).area > 0:
                    raise GeometryError(f"patch {self.id!r}: holes {j} and {i} overlap")

    @property
    def area(self):
        return self.outer.area - sum(h.area for h in self.holes)

    @property
    def bounds(self):
        return self.outer.bounds

    def polygon(self, spacing=None):
        spacing = spacing or _default_spacing(self.outer)
        poly = self.outer.to_polygon(spacing)
        for h in self.holes:
            poly = poly.difference(h.to_polygon(spacing))
        return poly


def _default_spacing(shape):
    x0, y0, x1, y1 = shape.bounds
    return max(x1 - x0, y1 - y0) / 2000


def contains(patch, p):
    """Membership test for a point (or arrays of points) in the plane.

    The outer boundary is inside, hole boundaries are outside.
    """
    x, y = (np.asarray(p[0], dtype=float), np.asarray(p[1], dtype=float))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("point must be finite")
    inside = patch.outer.contains(x, y)
    for h in patch.holes:
        inside = inside & ~h.contains(x, y)
    if inside.ndim == 0:
        return bool(inside)
    return inside


@dataclass(frozen=True)
class Cells:
    """Quadrature cells of one patch: centroids (N, 2) and areas (N,)."""

    centroids: np.ndarray
    areas: np.ndarray
    max_cell: float

    def __len__(self):
        return len(self.areas)

    @property
    def total_area(self):
        return float(self.areas.sum())


def discretize(patch, max_cell, min_cells=16):
    """Split a patch into planar cells no larger than ``max_cell`` on a side.

    Interior grid squares are kept whole; squares crossing the boundary are
    clipped against the polygonized patch and represented by the centroid
    and area of the clipped piece.
    """
    if not max_cell > 0:
        raise ValueError("max_cell must be positive")
    return discretize_region(patch.polygon(max_cell / 4), max_cell, min_cells, name=patch.id)


def discretize_region(poly, max_cell, min_cells=16, name="region"):
    """Grid-clip an arbitrary shapely (multi)polygon; see :func:`discretize`."""
    if not max_cell > 0:
        raise ValueError("max_cell must be positive")
    if poly.is_empty:
        raise ResolutionError(f"{name}: empty region")
    x0, y0, x1, y1 = poly.bounds
    # grid anchored at the origin so mirror-symmetric layouts give mirror-symmetric cells
    i0, i1 = math.floor(x0 / max_cell), math.ceil(x1 / max_cell)
    j0, j1 = math.floor(y0 / max_cell), math.ceil(y1 / max_cell)
    xs = np.arange(i0, i1) * max_cell
    ys = np.arange(j0, j1) * max_cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    boxes = shapely.box(gx, gy, gx + max_cell, gy + max_cell)
    shapely.prepare(poly)
    inner = shapely.contains(poly, boxes)
    touch = shapely.intersects(poly, boxes) & ~inner

    cen = [np.column_stack([gx[inner] + max_cell / 2, gy[inner] + max_cell / 2])]
    area = [np.full(int(inner.sum()), max_cell * max_cell)]
    if touch.any():
        clipped = shapely.intersection(boxes[touch], poly)
        a = shapely.area(clipped)
        keep = a > 0
        c = shapely.centroid(clipped[keep])
        cen.append(np.column_stack([shapely.get_x(c), shapely.get_y(c)]))
        area.append(a[keep])
    centroids = np.concatenate(cen)
    areas = np.concatenate(area)
    if len(areas) < min_cells:
        raise ResolutionError(f"{name}: only {len(areas)} cells at max_cell={max_cell:g}")
    order = np.lexsort((centroids[:, 1], centroids[:, 0]))
    return Cells(centroids[order], areas[order], max_cell)


GAP_MODELS = ("ground", "split")


def effective_regions(layout, gap_model="split", spacing=None):
    """Regions each electrode occupies once the gaps are assigned.

    ``ground``: gaps belong to the grounded plane, regions are the patches.
    ``split``: every point within half a gap width of a patch belongs to
    the nearest patch, i.e. each gap is cut along its midline.
    """
    if gap_model not in GAP_MODELS:
        raise GeometryError(f"unknown gap model {gap_model!r}")
    spacing = spacing or layout.scale / 4000
    polys = {p.id: p.polygon(spacing) for p in layout.patches}
    if gap_model == "ground" or layout.gap_width == 0:
        return polys
    half = layout.gap_width / 2
    quad = max(8, int(math.ceil(0.5 * math.pi * half / spacing)))
    grown = {pid: poly.buffer(half, quad_segs=quad) for pid, poly in polys.items()}
    ids = list(polys)
    eff = {}
    for pid in ids:
        region = grown[pid]
        for other in ids:
            if other != pid:
                region = region.difference(polys[other])
        eff[pid] = region
    # resolve regions claimed twice by splitting them at the nearest original patch
    contested = []
    for i, a in enumerate(ids):
        for b in ids[:i]:
            ov = eff[a].intersection(eff[b])
            if ov.area > 0:
                contested.append((a, b, ov))
    for a, b, ov in contested:
        eff[a] = eff[a].difference(ov)
        eff[b] = eff[b].difference(ov)
    for a, b, ov in contested:
        cells = discretize_region(ov, spacing, min_cells=1, name=f"{a}/{b}")
        pts = shapely.points(cells.centroids)
        da = shapely.distance(polys[a], pts)
        db = shapely.distance(polys[b], pts)
        sq = shapely.box(*(cells.centroids - spacing / 2).T, *(cells.centroids + spacing / 2).T)
        pieces = shapely.intersection(sq, ov)
        to_a = shapely.union_all(pieces[da <= db])
        to_b = shapely.union_all(pieces[da > db])
        eff[a] = eff[a].union(to_a)
        eff[b] = eff[b].union(to_b)
    return eff


@dataclass(frozen=True)
class TrapLayout:
    patches: tuple
    gap_width: float = 0.0
    via: object = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            raise GeometryError("duplicate patch ids")

    def __getitem__(self, pid):
        for p in self.patches:
            if p.id == pid:
                return p
        raise KeyError(pid)

    @property
    def ids(self):
        return [p.id for p in self.patches]

    def by_role(self, role):
        return [p for p in self.patches if p.role == role]

    def rf_ids(self):
        return [p.id for p in self.patches if p.role in ("RF1", "RF2")]

    def dc_ids(self):
        return [p.id for p in self.patches if p.role == "DC"]

    @property
    def bounds(self):
        b = np.array([p.bounds for p in self.patches])
        return (b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max())

    @property
    def scale(self):
        x0, y0, x1, y1 = self.bounds
        return max(x1 - x0, y1 - y0)

    def check_disjoint(self, spacing=None):
        """Raise if any two patch polygons overlap with positive area."""
        spacing = spacing or self.scale / 4000
        polys = [p.polygon(spacing) for p in self.patches]
        tol = (spacing**2) * 10
        for i in range(len(polys)):
            for j in range(i):
                inter = polys[i].intersection(polys[j]).area
                if inter > tol:
                    raise GeometryError(
                        f"patches {self.patches[j].id!r} and {self.patches[i].id!r} overlap ({inter:.3g} m^2)"
                    )

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        d = {
            "gap_width": self.gap_width,
            "patches": [
                {
                    "id": p.id,
                    "role": p.role,
                    "outer": shape_to_dict(p.outer),
                    "holes": [shape_to_dict(h) for h in p.holes],
                }
                for p in self.patches
            ],
        }
        if self.via is not None:
            d["via"] = shape_to_dict(self.via)
        return d

    @classmethod
    def from_dict(cls, d):
        patches = tuple(
            ElectrodePatch(
                id=str(p["id"]),
                role=str(p["role"]),
                outer=shape_from_dict(p["outer"]),
                holes=tuple(shape_from_dict(h) for h in p.get("holes", [])),
            )
            for p in d["patches"]
        )
        via = shape_from_dict(d["via"]) if d.get("via") else None
        return cls(patches=patches, gap_width=float(d.get("gap_width", 0.0)), via=via)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# the default trap layout


@dataclass(frozen=True)
class PaperTrapParams:
    ground_diameter: float = 1.1e-3
    rf_major: float = 5.9e-3
    rf_minor: float = 2.8e-3
    rf_offset_y: float = 5.0e-4
    gap: float = 1.0e-4
    via_diameter: float = 4.0e-4
    via_offset_y: float = 3.0e-4
    rf_split_axis: str = "x"
    dc_pad_size: tuple[float, float] = (2.0e-3, 2.0e-3)

    def validate(self):
        for name in ("ground_diameter", "rf_major", "rf_minor", "via_diameter"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be positive")
        if self.gap < 0:
            raise GeometryError("gap must be non-negative")
        if min(self.dc_pad_size) <= 0:
            raise GeometryError("dc_pad_size must be positive")
        if abs(self.via_offset_y) + self.via_diameter / 2 > self.ground_diameter / 2:
            raise GeometryError("via extends outside the ground disk")
        if self.rf_split_axis != "x":
            raise GeometryError("only rf_split_axis='x' (cut along y = const) is supported")
        # ground disk plus gap must sit strictly inside the RF ellipse
        r = self.ground_diameter / 2 + self.gap
        a, b = self.rf_major / 2, self.rf_minor / 2
        t = np.linspace(0, 2 * np.pi, 721)
        xs, ys = r * np.cos(t), r * np.sin(t)
        if np.any((xs / a) ** 2 + ((ys - self.rf_offset_y) / b) ** 2 >= 1):
            raise GeometryError("ground disk and gap do not fit inside the RF ellipse")


def build_paper_trap(params: PaperTrapParams | None = None) -> TrapLayout:
    """Ground disk at the origin, split elliptical RF pad, four DC side pads.

    RF1 is the half of the RF annulus with y below the ellipse center, RF2
    the half above it; the downward half is thus nearer the trapping point
    and the fiber, and the ratio V2/V1 moves the node along y.
    """
    params = params or PaperTrapParams()
    params.validate()
    g = params.gap
    r_ground = params.ground_diameter / 2
    a, b = params.rf_major / 2, params.rf_minor / 2
    yc = params.rf_offset_y
    hole = Circle((0.0, 0.0), r_ground + g)

    rf1_outer = HalfEllipse((0.0, yc), a, b, side=-1)
    rf2_outer = HalfEllipse((0.0, yc), a, b, side=+1)
    # the ground hole straddles the cut line, so each half is its own region
    rf1 = ElectrodePatch("RF1", "RF1", HalfAnnulus(rf1_outer, hole))
    rf2 = ElectrodePatch("RF2", "RF2", HalfAnnulus(rf2_outer, hole))

    pw, ph = params.dc_pad_size
    dc = (
        ElectrodePatch("DC_XP", "DC", rectangle(a + g + pw / 2, yc, pw, ph)),
        ElectrodePatch("DC_XN", "DC", rectangle(-(a + g + pw / 2), yc, pw, ph)),
        ElectrodePatch("DC_YP", "DC", rectangle(0.0, yc + b + g + ph / 2, pw, ph)),
        ElectrodePatch("DC_YN", "DC", rectangle(0.0, yc - b - g - ph / 2, pw, ph)),
    )
    ground = ElectrodePatch("GND", "GROUND", Circle((0.0, 0.0), r_ground))
    # the via sits on the side of the trapping point, opposite the RF shift
    via = Circle((0.0, -math.copysign(params.via_offset_y, yc or 1.0)), params.via_diameter / 2)
    layout = TrapLayout(patches=(ground, rf1, rf2) + dc, gap_width=g, via=via, meta={"params": params})
    layout.check_disjoint()
    return layout
