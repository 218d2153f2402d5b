"""Gapless-plane electrostatics, RF pseudopotential, node and secular spectrum.

Each electrode patch held at 1 V with every other part of the plane
grounded produces

    phi(r) = z / (2 pi) * Int_patch dA' / |r - r'|^3

which is evaluated by midpoint quadrature over the cells returned by
:func:`fibertrap.geometry.discretize`.  The field is the analytic gradient
of the same sum, so ``field == -grad(potential)`` holds to rounding.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants, optimize

from .geometry import TrapLayout, discretize_region, effective_regions

AMU = constants.atomic_mass
E_CHARGE = constants.elementary_charge

DEFAULT_MAX_CELL = 20e-6
DEFAULT_GAP_MODEL = "split"
DEFAULT_HESSIAN_STEP = 1e-6


class FieldError(ValueError):
    """Base class for field-evaluation failures."""


class EvaluationAtPlane(FieldError):
    """Evaluation requested at or below the electrode plane."""


class NoConvergence(FieldError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class UnstableConfiguration(FieldError):
    pass


@dataclass(frozen=True)
class IonSpecies:
    mass: float
    charge: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.charge == 0:
            raise ValueError("charge must be non-zero")


SR88 = IonSpecies(mass=87.9056122571 * AMU, charge=E_CHARGE)


@dataclass(frozen=True)
class DriveConfig:
    """RF drive: RF1 gets ``v1 cos(omega t)``, RF2 gets ``delta v1 cos(omega t + theta)``.

    ``dc_voltages`` maps DC electrode ids to volts; ``stray_field`` is a
    uniform static field (V/m) added on top, e.g. patch charging.
    """

    omega_rf: float = 2 * math.pi * 6e6
    v1: float = 125.0
    delta: float = 1.0
    theta: float = 0.0
    dc_voltages: dict = field(default_factory=dict)
    stray_field: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.omega_rf > 0:
            raise ValueError("omega_rf must be positive")
        if self.v1 < 0:
            raise ValueError("v1 must be non-negative")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    def replace(self, **kw):
        d = dict(
            omega_rf=self.omega_rf,
            v1=self.v1,
            delta=self.delta,
            theta=self.theta,
            dc_voltages=dict(self.dc_voltages),
            stray_field=tuple(self.stray_field),
        )
        d.update(kw)
        return DriveConfig(**d)

    @property
    def rf_weights(self):
        """Complex amplitude per RF role."""
        return {"RF1": self.v1 + 0j, "RF2": self.v1 * self.delta * np.exp(1j * self.theta)}


# --------------------------------------------------------------------------
# bases


def _as_points(r):
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    pts = np.atleast_2d(r)
    if pts.shape[-1] != 3:
        raise ValueError("points must be 3-vectors")
    if np.any(pts[:, 2] <= 0):
        raise EvaluationAtPlane("evaluation point must have z > 0")
    return pts, single


class FieldBasis:
    """Unit-voltage potentials and fields of every patch of a layout.

    Parameters
    ----------
    layout : TrapLayout
    max_cell : float
        Quadrature cell size (m).
    overrides : dict, optional
        Per-patch cell size, ``{patch_id: max_cell}``.
    gap_model : {"split", "ground"}
        How the inter-electrode gaps enter the gapless plane; see
        :func:`fibertrap.geometry.effective_regions`.
    """

    chunk = 1 << 22

    def __init__(self, layout: TrapLayout, max_cell=DEFAULT_MAX_CELL, overrides=None, gap_model=DEFAULT_GAP_MODEL):
        self.layout = layout
        self.max_cell = max_cell
        self.gap_model = gap_model
        overrides = overrides or {}
        finest = min([max_cell, *overrides.values()])
        regions = effective_regions(layout, gap_model, spacing=finest / 4)
        self.cells = {}
        for p in layout.patches:
            self.cells[p.id] = discretize_region(regions[p.id], overrides.get(p.id, max_cell), name=p.id)
        self.resolution = {pid: c.max_cell for pid, c in self.cells.items()}
        self.roles = {p.id: p.role for p in layout.patches}

    @property
    def ids(self):
        return list(self.cells)

    def ids_with_role(self, role):
        return [pid for pid, r in self.roles.items() if r == role]

    @property
    def center(self):
        return np.zeros(3)

    @property
    def scale(self):
        return self.layout.scale

    def _sums(self, pid, pts):
        c = self.cells[pid]
        cx, cy = c.centroids[:, 0], c.centroids[:, 1]
        w = c.areas
        out = np.empty((len(pts), 4))
        step = max(1, self.chunk // max(len(w), 1))
        for s in range(0, len(pts), step):
            p = pts[s : s + step]
            dx = p[:, 0, None] - cx[None, :]
            dy = p[:, 1, None] - cy[None, :]
            z = p[:, 2, None]
            d2 = dx * dx + dy * dy + z * z
            i3 = w / (d2 * np.sqrt(d2))
            i5 = i3 / d2
            s3 = i3.sum(axis=1)
            # dphi/dx, dphi/dy, dphi/dz up to the 1/(2 pi) factor
            gx = -3 * p[:, 2] * (dx * i5).sum(axis=1)
            gy = -3 * p[:, 2] * (dy * i5).sum(axis=1)
            gz = s3 - 3 * p[:, 2] ** 2 * i5.sum(axis=1)
            out[s : s + step, 0] = p[:, 2] * s3
            out[s : s + step, 1] = gx
            out[s : s + step, 2] = gy
            out[s : s + step, 3] = gz
        return out / (2 * math.pi)

    def potential(self, pid, r):
        pts, single = _as_points(r)
        v = self._sums(pid, pts)[:, 0]
        return float(v[0]) if single else v

    def field(self, pid, r):
        pts, single = _as_points(r)
        e = -self._sums(pid, pts)[:, 1:]
        return e[0] if single else e


class IdealQuadrupole:
    """Synthetic basis with exactly quadratic potentials around ``center``.

    ``RF1`` has potential ``sum_i k_i u_i^2 / (2 r0^2)`` per volt,
    ``u = r - center``, with the curvature weights ``k`` summing to zero;
    ``RF2`` is identically zero; ``DC`` electrodes carry their own weights
    plus an optional linear term (a uniform field per volt).
    """

    def __init__(self, center=(0.0, 0.0, 5e-4), r0=5e-4, rf_weights=(-0.5, -0.5, 1.0), dc=None):
        self.center_ = np.asarray(center, dtype=float)
        self.r0 = r0
        self.k = {"RF1": np.asarray(rf_weights, dtype=float), "RF2": np.zeros(3)}
        self.lin = {"RF1": np.zeros(3), "RF2": np.zeros(3)}
        self.roles = {"RF1": "RF1", "RF2": "RF2"}
        for pid, spec in (dc or {}).items():
            self.k[pid] = np.asarray(spec.get("curvature", (0, 0, 0)), dtype=float)
            self.lin[pid] = np.asarray(spec.get("gradient", (0, 0, 0)), dtype=float)
            self.roles[pid] = "DC"
        self.resolution = {pid: 0.0 for pid in self.k}

    @property
    def ids(self):
        return list(self.k)

    def ids_with_role(self, role):
        return [pid for pid, r in self.roles.items() if r == role]

    @property
    def center(self):
        return self.center_.copy()

    @property
    def scale(self):
        return float(self.center_[2])

    def potential(self, pid, r):
        pts, single = _as_points(r)
        u = pts - self.center_
        v = (u**2 @ self.k[pid]) / (2 * self.r0**2) + u @ self.lin[pid]
        return float(v[0]) if single else v

    def field(self, pid, r):
        pts, single = _as_points(r)
        u = pts - self.center_
        e = -(u * self.k[pid] / self.r0**2 + self.lin[pid])
        return e[0] if single else e


@functools.lru_cache(maxsize=8)
def _cached_basis(layout, max_cell, gap_model):
    return FieldBasis(layout, max_cell, gap_model=gap_model)


def get_basis(obj, max_cell=DEFAULT_MAX_CELL, gap_model=DEFAULT_GAP_MODEL):
    """Return a basis for a layout (memoized) or pass a basis through."""
    if isinstance(obj, TrapLayout):
        return _cached_basis(obj, max_cell, gap_model)
    return obj


def basis_potential(layout, pid, r, max_cell=DEFAULT_MAX_CELL):
    return get_basis(layout, max_cell).potential(pid, r)


def basis_field(layout, pid, r, max_cell=DEFAULT_MAX_CELL):
    return get_basis(layout, max_cell).field(pid, r)


# --------------------------------------------------------------------------
# combined fields


def rf_field_phasor(layout, drive: DriveConfig, r):
    """Complex RF field amplitude; the physical field is Re[phasor e^{i omega t}]."""
    basis = get_basis(layout)
    pts, single = _as_points(r)
    out = np.zeros((len(pts), 3), dtype=complex)
    for role, amp in drive.rf_weights.items():
        for pid in basis.ids_with_role(role):
            if amp != 0:
                out += amp * basis.field(pid, pts)
    return out[0] if single else out


def dc_potential(layout, drive: DriveConfig, r):
    basis = get_basis(layout)
    pts, single = _as_points(r)
    v = np.zeros(len(pts))
    for pid, volts in drive.dc_voltages.items():
        if volts:
            v = v + volts * basis.potential(pid, pts)
    v = v - pts @ np.asarray(drive.stray_field, dtype=float)
    return float(v[0]) if single else v


def dc_field(layout, drive: DriveConfig, r):
    basis = get_basis(layout)
    pts, single = _as_points(r)
    e = np.zeros((len(pts), 3))
    for pid, volts in drive.dc_voltages.items():
        if volts:
            e = e + volts * basis.field(pid, pts)
    e = e + np.asarray(drive.stray_field, dtype=float)
    return e[0] if single else e


def rf_intensity(layout, drive, r):
    """Time-averaged |E_RF|^2 times 2, i.e. |Re E|^2 + |Im E|^2 of the phasor."""
    e = rf_field_phasor(layout, drive, r)
    return np.sum(e.real**2 + e.imag**2, axis=-1)


def pseudopotential(layout, drive: DriveConfig, species: IonSpecies, r):
    """Total secular potential energy (J): RF ponderomotive part plus q*phi_DC."""
    psi_rf = species.charge**2 * rf_intensity(layout, drive, r) / (4 * species.mass * drive.omega_rf**2)
    return psi_rf + species.charge * dc_potential(layout, drive, r)


# --------------------------------------------------------------------------
# node finding


def _rf_residual(basis, drive, r):
    e = rf_field_phasor(basis, drive, r)
    return np.concatenate([e.real, e.imag])


def _rf_jacobian(basis, drive, r, h=1e-7):
    cols = []
    for k in range(3):
        dr = np.zeros(3)
        dr[k] = h
        cols.append((_rf_residual(basis, drive, r + dr) - _rf_residual(basis, drive, r - dr)) / (2 * h))
    return np.column_stack(cols)


def find_node(layout, drive: DriveConfig, guess, xtol=1e-9, max_iter=2000, max_cell=DEFAULT_MAX_CELL):
    """Locate the local minimum of the time-averaged RF field magnitude.

    Nelder-Mead on ``|E|^2`` from ``guess``, then Gauss-Newton on the
    stacked real/imaginary field components to polish below ``xtol``.
    """
    basis = get_basis(layout, max_cell)
    guess = np.asarray(guess, dtype=float)
    if guess[2] <= 0:
        raise EvaluationAtPlane("guess must have z > 0")
    scale = max(abs(guess[2]), 1e-4)

    def f(u):
        r = guess + u * scale
        if r[2] <= 0:
            return np.inf
        res = _rf_residual(basis, drive, r)
        return float(res @ res)

    f0 = f(np.zeros(3)) or 1.0
    sol = optimize.minimize(
        lambda u: f(u) / f0,
        np.zeros(3),
        method="Nelder-Mead",
        options={
            "xatol": xtol / scale,
            "fatol": 1e-30,
            "maxiter": max_iter,
            "maxfev": 2 * max_iter,
            "initial_simplex": np.vstack([np.zeros(3), 0.1 * np.eye(3)]),
        },
    )
    r = guess + sol.x * scale
    # Gauss-Newton polish; the residual is smooth and the Jacobian full rank
    for _ in range(50):
        res = _rf_residual(basis, drive, r)
        jac = _rf_jacobian(basis, drive, r)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        r_new = r + step
        if r_new[2] <= 0:
            break
        if _rf_residual(basis, drive, r_new) @ _rf_residual(basis, drive, r_new) > res @ res:
            break
        r = r_new
        if np.linalg.norm(step) < xtol * 1e-3:
            break
    if not np.all(np.isfinite(r)) or (not sol.success and np.linalg.norm(r - guess) > 10 * scale):
        raise NoConvergence("node finder did not converge", last=r)
    return r


def find_equilibrium(layout, drive, species, guess, xtol=1e-10):
    """Minimum of the total pseudopotential (RF + DC); equals the node when DC = 0."""
    basis = get_basis(layout)

    def grad(r):
        # analytic: grad psi = (q^2/(2 m W^2)) Re(J^H E) - q E_dc
        e = rf_field_phasor(basis, drive, r)
        jac = _rf_jacobian(basis, drive, r)
        ecat = np.concatenate([e.real, e.imag])
        g_rf = species.charge**2 / (2 * species.mass * drive.omega_rf**2) * (jac.T @ ecat)
        return g_rf - species.charge * dc_field(basis, drive, r)

    r = np.asarray(guess, dtype=float)
    for _ in range(100):
        g = grad(r)
        h = _fd_hessian(lambda p: pseudopotential(basis, drive, species, p), r, 1e-6)
        step = -np.linalg.solve(h, g)
        r = r + step
        if np.linalg.norm(step) < xtol:
            break
    else:
        raise NoConvergence("equilibrium search did not converge", last=r)
    return r


# --------------------------------------------------------------------------
# spectrum


@dataclass(frozen=True)
class SpectrumResult:
    node_position: np.ndarray
    secular_frequencies: np.ndarray  # (omega_x, omega_y', omega_z') rad/s
    principal_axes: np.ndarray  # rows: x, y', z' unit vectors
    tilt_angle_yz: float
    mathieu_q: np.ndarray
    curvatures: np.ndarray

    def as_dict(self):
        d = {
            "node_x_m": self.node_position[0],
            "node_y_m": self.node_position[1],
            "node_z_m": self.node_position[2],
            "tilt_angle_yz_rad": self.tilt_angle_yz,
            "tilt_angle_yz_deg": math.degrees(self.tilt_angle_yz),
        }
        for name, w, q, ax in zip(("x", "yp", "zp"), self.secular_frequencies, self.mathieu_q, self.principal_axes):
            d[f"omega_{name}_rad_s"] = w
            d[f"f_{name}_hz"] = w / (2 * math.pi)
            d[f"q_{name}"] = q
            for c, v in zip("xyz", ax):
                d[f"axis_{name}_{c}"] = v
        return {k: float(v) for k, v in d.items()}


def _fd_hessian(fun, r, h):
    r = np.asarray(r, dtype=float)
    eye = np.eye(3) * h
    f0 = fun(r)
    hess = np.empty((3, 3))
    for i in range(3):
        hess[i, i] = (fun(r + eye[i]) - 2 * f0 + fun(r - eye[i])) / h**2
        for j in range(i):
            v = (
                fun(r + eye[i] + eye[j])
                - fun(r + eye[i] - eye[j])
                - fun(r - eye[i] + eye[j])
                + fun(r - eye[i] - eye[j])
            ) / (4 * h * h)
            hess[i, j] = hess[j, i] = v
    return hess


def order_axes(vecs):
    """Label eigenvectors (columns) as x, y', z'; return permutation and tilt.

    x is the vector with the largest |x| component; of the remaining pair
    y' is the one closer to the y axis.  The tilt is the signed angle from
    +y to y' around +x, folded into (-45, 45] degrees.
    """
    vecs = np.asarray(vecs)
    ix = int(np.argmax(np.abs(vecs[0])))
    rest = [k for k in range(3) if k != ix]
    iy = max(rest, key=lambda k: abs(vecs[1, k]))
    iz = rest[0] if rest[1] == iy else rest[1]
    ax = [vecs[:, ix].copy(), vecs[:, iy].copy(), vecs[:, iz].copy()]
    if ax[0][0] < 0:
        ax[0] = -ax[0]
    if ax[1][1] < 0:
        ax[1] = -ax[1]
    ax[2] = np.cross(ax[0], ax[1])
    tilt = math.atan2(ax[1][2], ax[1][1])
    return [ix, iy, iz], np.array(ax), tilt


def secular_spectrum(layout, drive, species, guess=None, step=DEFAULT_HESSIAN_STEP, node=None):
    basis = get_basis(layout)
    if node is None:
        if guess is None:
            guess = basis.center + np.array([0, 0, 0.5 * basis.scale if isinstance(basis, FieldBasis) else 0])
        node = find_node(basis, drive, guess)
        if drive.dc_voltages or any(drive.stray_field):
            node = find_equilibrium(basis, drive, species, node)
    node = np.asarray(node, dtype=float)
    hess = _fd_hessian(lambda p: pseudopotential(basis, drive, species, p), node, step)
    lam, vecs = np.linalg.eigh(hess)
    if np.any(lam <= 0):
        raise UnstableConfiguration(f"pseudopotential curvature not positive definite: {lam}")
    perm, axes, tilt = order_axes(vecs)
    lam = lam[perm]
    omega = np.sqrt(lam / species.mass)
    jac = _rf_jacobian(basis, drive, node)[:3]  # real part of dE_i/dx_j
    qs = np.array([2 * species.charge * (a @ jac @ a) / (species.mass * drive.omega_rf**2) for a in axes])
    return SpectrumResult(node, omega, axes, tilt, qs, lam)


# --------------------------------------------------------------------------
# export


def write_field_map(path, layout, drive, species, points):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    e = rf_field_phasor(layout, drive, pts)
    psi = pseudopotential(layout, drive, species, pts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_m", "y_m", "z_m", "Ex_V_m", "Ey_V_m", "Ez_V_m", "Psi_J"])
        # in-phase (RF1-referenced) field amplitude
        for p, ev, ps in zip(pts, np.atleast_2d(e).real, np.atleast_1d(psi)):
            w.writerow([f"{v:.12g}" for v in (*p, *ev, ps)])
