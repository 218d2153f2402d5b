"""Fiber mode, shelving response and photo-induced charging.

The fiber emits a fundamental Gaussian mode whose waist sits at the fiber
tip, so the beam only diverges towards the ion.  The shelving rate is
taken proportional to the local intensity.  Charging of the fiber
dielectric is a first-order process: an exponential approach to a
power-dependent saturation field while the light is on and an exponential
decay to zero while it is off.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .fields import IonSpecies, SpectrumResult, UnstableConfiguration

WAVELENGTH_674 = 674e-9


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("direction must be non-zero")
    return v / n


@dataclass(frozen=True)
class GaussianBeam:
    """Gaussian mode launched from ``origin`` along ``direction``.

    Parameters
    ----------
    waist_w0 : float
        1/e^2 intensity radius at the fiber tip (m).
    wavelength : float
        Vacuum wavelength (m).
    origin, direction : array_like
        Fiber tip position (m) and propagation direction.
    power : float
        Total beam power (W).
    """

    waist_w0: float
    wavelength: float = WAVELENGTH_674
    origin: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (0.0, 0.0, 1.0)
    power: float = 1.0

    def __post_init__(self):
        if not self.waist_w0 > 0:
            raise ValueError("waist_w0 must be positive")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if self.power < 0:
            raise ValueError("power must be non-negative")
        object.__setattr__(self, "origin", tuple(float(v) for v in np.asarray(self.origin, dtype=float)))
        object.__setattr__(self, "direction", tuple(float(v) for v in _unit(self.direction)))

    @property
    def rayleigh_range(self):
        return math.pi * self.waist_w0**2 / self.wavelength

    def replace(self, **kw):
        d = dict(
            waist_w0=self.waist_w0,
            wavelength=self.wavelength,
            origin=self.origin,
            direction=self.direction,
            power=self.power,
        )
        d.update(kw)
        return GaussianBeam(**d)

    def local_coords(self, r):
        """Axial distance and transverse radius of points ``r`` (shape (..., 3))."""
        d = np.asarray(r, dtype=float) - np.asarray(self.origin)
        u = np.asarray(self.direction)
        s = d @ u
        rho2 = np.maximum(np.sum(d * d, axis=-1) - s * s, 0.0)
        return s, np.sqrt(rho2)


def waist_at(beam: GaussianBeam, z):
    """Beam radius ``w(z) = w0 sqrt(1 + (z/zR)^2)`` at axial distance ``z``."""
    z = np.asarray(z, dtype=float)
    w = beam.waist_w0 * np.sqrt(1.0 + (z / beam.rayleigh_range) ** 2)
    return float(w) if w.ndim == 0 else w


def calibrate_w0(w_target, z, wavelength=WAVELENGTH_674, branch="small"):
    """Tip waist that produces radius ``w_target`` at axial distance ``z``.

    ``w(z) = w_target`` has two roots in ``w0`` when ``w_target`` exceeds
    the minimum reachable radius ``sqrt(2 z lambda / pi)``.  The small root
    (far field at ``z``) describes a single-mode fiber; ``branch="large"``
    returns the collimated solution.
    """
    if not (w_target > 0 and z > 0):
        raise ValueError("w_target and z must be positive")
    lam = wavelength

    def f(w0):
        zr = math.pi * w0**2 / lam
        return w0 * math.sqrt(1 + (z / zr) ** 2) - w_target

    w_min = math.sqrt(z * lam / math.pi)  # argmin of w(z) over w0
    if f(w_min) > 0:
        raise ValueError(f"no tip waist reaches w = {w_target:g} m at z = {z:g} m")
    if branch == "small":
        return optimize.brentq(f, w_min * 1e-6, w_min, xtol=1e-18, rtol=1e-14)
    if branch == "large":
        return optimize.brentq(f, w_min, w_target, xtol=1e-18, rtol=1e-14)
    raise ValueError("branch must be 'small' or 'large'")


def peak_intensity(beam: GaussianBeam, z):
    w = waist_at(beam, z)
    return 2 * beam.power / (math.pi * np.asarray(w) ** 2)


def intensity(beam: GaussianBeam, r):
    """Intensity (W/m^2) at ``r``; accepts a single point or an (N, 3) array."""
    s, rho = beam.local_coords(r)
    if np.any(s < 0):
        raise ValueError("point lies behind the fiber tip")
    w = beam.waist_w0 * np.sqrt(1.0 + (s / beam.rayleigh_range) ** 2)
    i = 2 * beam.power / (math.pi * w**2) * np.exp(-2 * rho**2 / w**2)
    return float(i) if np.ndim(i) == 0 else i


def shelving_rate(i, k):
    """Weak-drive shelving rate ``k * i`` (1/s)."""
    i = np.asarray(i, dtype=float)
    if np.any(i < 0) or k < 0:
        raise ValueError("intensity and k must be non-negative")
    out = k * i
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# charging


@dataclass(frozen=True)
class ChargingModel:
    """First-order photo-charging of the fiber dielectric.

    ``e_max`` is the saturated field magnitude at the ion (V/m) for beam
    power ``power_ref``; the saturation value scales linearly with power.
    """

    e_max: float = 10.0
    direction: tuple = (0.0, 0.0, 1.0)
    tau_charge: float = 1.6
    tau_discharge: float = 4.7
    power_ref: float = 125e-6

    def __post_init__(self):
        if self.e_max < 0:
            raise ValueError("e_max must be non-negative")
        if not (self.tau_charge > 0 and self.tau_discharge > 0):
            raise ValueError("time constants must be positive")
        if not self.power_ref > 0:
            raise ValueError("power_ref must be positive")
        object.__setattr__(self, "direction", tuple(float(v) for v in _unit(self.direction)))

    def e_sat(self, power):
        return self.e_max * power / self.power_ref


def _check_schedule(schedule):
    sched = [(float(a), float(b)) for a, b in schedule]
    last = -math.inf
    for a, b in sched:
        if not b >= a:
            raise ValueError("each interval needs t_off >= t_on")
        if a < last:
            raise ValueError("schedule intervals must be sorted and non-overlapping")
        last = b
    return sched


def charging_magnitude(model: ChargingModel, schedule, power, t):
    """Field magnitude |E|(t) (V/m) for light-on intervals ``schedule``."""
    sched = _check_schedule(schedule)
    t = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t).ravel()
    order = np.argsort(flat, kind="stable")
    out = np.empty_like(flat)
    e_sat = model.e_sat(power)
    # walk the piecewise solution forward; the state at each boundary is exact
    bounds = []
    e = 0.0
    t_prev = -math.inf
    for a, b in sched:
        if t_prev > -math.inf:
            e = e * math.exp(-(a - t_prev) / model.tau_discharge)
        bounds.append((a, b, e))
        e = e_sat + (e - e_sat) * math.exp(-(b - a) / model.tau_charge)
        t_prev = b
    starts = np.array([a for a, _, _ in bounds])
    for idx in order:
        tt = flat[idx]
        k = np.searchsorted(starts, tt, side="right") - 1
        if k < 0:
            out[idx] = 0.0
            continue
        a, b, e0 = bounds[k]
        if tt <= b:
            out[idx] = e_sat + (e0 - e_sat) * math.exp(-(tt - a) / model.tau_charge)
        else:
            e_b = e_sat + (e0 - e_sat) * math.exp(-(b - a) / model.tau_charge)
            out[idx] = e_b * math.exp(-(tt - b) / model.tau_discharge)
    out = out.reshape(np.shape(t))
    return float(out) if out.ndim == 0 else out


def charging_field(model: ChargingModel, schedule, power, t):
    """Induced field vector(s) (V/m); shape (3,) for scalar ``t`` else (N, 3)."""
    mag = charging_magnitude(model, schedule, power, t)
    return np.multiply.outer(mag, np.asarray(model.direction))


def displacement_from_field(e, species: IonSpecies, spectrum: SpectrumResult):
    """Static shift ``sum_k a_k q (E . a_k) / (m w_k^2)`` along the principal axes."""
    w = np.asarray(spectrum.secular_frequencies, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise UnstableConfiguration("spectrum has non-positive secular frequencies")
    axes = np.asarray(spectrum.principal_axes, dtype=float)
    e = np.asarray(e, dtype=float)
    proj = e @ axes.T  # (..., 3)
    return (proj * species.charge / (species.mass * w**2)) @ axes


def write_transient(path, t, e):
    """CSV export of an induced-field transient."""
    e = np.atleast_2d(e)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "Ex_V_m", "Ey_V_m", "Ez_V_m"])
        for tt, ev in zip(np.atleast_1d(t), e):
            w.writerow([f"{tt:.9g}", *(f"{v:.12g}" for v in ev)])
