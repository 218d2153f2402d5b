"""Classical ion trajectories in the full time-dependent trap field.

Equation of motion ``m r'' = q E(r, t) - m gamma r'`` with

    E(r, t) = A(r) cos(W t) - B(r) sin(W t) + D(r)

where ``A + iB`` is the RF phasor and ``D`` the static field.  The basis
fields are replaced by polynomial expansions around the node
(:class:`FieldCache`) so that millions of steps stay cheap; the stepping
itself lives in a compiled kernel with a numpy fallback.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import constants

from . import _pykernels
from .manifest import write_manifest
from .fields import (
    DriveConfig,
    FieldBasis,
    FieldError,
    IonSpecies,
    NoConvergence,
    UnstableConfiguration,
    find_node,
    get_basis,
)

try:  # pragma: no cover - exercised implicitly
    from . import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

KERNELS = {"python": _pykernels}
if _ckernels is not None:
    KERNELS["compiled"] = _ckernels


def _select_kernel():
    want = os.environ.get("FIBERTRAP_KERNEL", "").strip().lower()
    if want:
        if want not in KERNELS:
            raise ImportError(f"kernel {want!r} unavailable; have {sorted(KERNELS)}")
        return want
    return "compiled" if "compiled" in KERNELS else "python"


KERNEL = _select_kernel()


def get_kernel(name=None):
    return KERNELS[name or KERNEL]


class DynamicsError(FieldError):
    pass


class IonLost(DynamicsError):
    pass


class StepInstability(DynamicsError):
    pass


class InsufficientWindow(DynamicsError):
    pass


class CacheAccuracyError(DynamicsError):
    pass


# --------------------------------------------------------------------------
# polynomial field cache


def monomial_exponents(order):
    """Exponents ``(i, j, k)`` with ``i + j + k <= order``, constant first."""
    out = [(i, j, d - i - j) for d in range(order + 1) for i in range(d, -1, -1) for j in range(d - i, -1, -1)]
    return np.array(out, dtype=np.int32)


def _monomials(u, expo):
    u = np.atleast_2d(u)
    order = int(expo.max())
    pw = np.ones((order + 1,) + u.shape)
    for k in range(1, order + 1):
        pw[k] = pw[k - 1] * u
    return pw[expo[:, 0], :, 0] * pw[expo[:, 1], :, 1] * pw[expo[:, 2], :, 2]  # (M, N)


def _monomial_grad(u, expo):
    """d(monomial)/du, shape (3, M, N)."""
    u = np.atleast_2d(u)
    order = int(expo.max())
    pw = np.ones((order + 2,) + u.shape)
    for k in range(1, order + 1):
        pw[k] = pw[k - 1] * u
    out = np.zeros((3, len(expo), len(u)))
    for c in range(3):
        e = expo.copy()
        fac = e[:, c].astype(float)
        e[:, c] = np.maximum(e[:, c] - 1, 0)
        mono = pw[e[:, 0], :, 0] * pw[e[:, 1], :, 1] * pw[e[:, 2], :, 2]
        out[c] = fac[:, None] * mono
    return out


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = math.pi * (1 + 5**0.5) * k
    return np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])


class FieldCache:
    """Least-squares polynomial fit of every basis field around ``center``.

    The constant term of each fit is pinned to the exact field at the
    center, so the cache reproduces the node exactly; the remaining
    coefficients are fitted on a Chebyshev tensor grid covering the cube
    of half-width ``radius``.
    """

    def __init__(self, layout, center, radius=50e-6, order=4, max_cell=None):
        if order < 2:
            raise ValueError("cache order must be >= 2")
        basis = get_basis(layout) if max_cell is None else get_basis(layout, max_cell)
        self.basis = basis
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.order = int(order)
        self.expo = monomial_exponents(order)
        self.roles = {pid: basis.roles[pid] for pid in basis.ids}
        self.ids = [pid for pid in basis.ids if self.roles[pid] in ("RF1", "RF2", "DC")]
        n = order + 4
        g = np.cos(np.pi * (np.arange(n) + 0.5) / n)
        u = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = self.center + self.radius * u
        mono = _monomials(u, self.expo)[1:].T  # (P, M-1)
        self.coef = {}
        for pid in self.ids:
            e0 = basis.field(pid, self.center)
            e = basis.field(pid, pts) - e0
            sol, *_ = np.linalg.lstsq(mono, e, rcond=None)
            c = np.empty((3, len(self.expo)))
            c[:, 0] = e0
            c[:, 1:] = sol.T
            self.coef[pid] = c
        self.scale = float(basis.scale)

    def __getstate__(self):
        d = dict(self.__dict__)
        d["basis"] = None  # quadrature grids are not needed once fitted
        return d

    def combine(self, drive: DriveConfig):
        """Coefficients (3, 3, M) of the in-phase, quadrature and static fields."""
        m = len(self.expo)
        out = np.zeros((3, 3, m))
        w = drive.rf_weights
        for pid in self.ids:
            role = self.roles[pid]
            if role in w:
                out[0] += w[role].real * self.coef[pid]
                out[1] += w[role].imag * self.coef[pid]
        for pid, volts in drive.dc_voltages.items():
            if volts:
                if pid not in self.coef:
                    raise KeyError(f"no DC electrode {pid!r} in the cache")
                out[2] += volts * self.coef[pid]
        out[2, :, 0] += np.asarray(drive.stray_field, dtype=float)
        return out

    def _u(self, r):
        return (np.atleast_2d(np.asarray(r, dtype=float)) - self.center) / self.radius

    def evaluate(self, coef, r):
        """Fields (3, N, 3): A, B, D at points ``r``."""
        mono = _monomials(self._u(r), self.expo)
        return np.einsum("tcm,mn->tnc", coef, mono)

    def jacobian(self, coef, r):
        """dE_c/dr_k for A, B, D, shape (3, N, 3, 3) indexed [t, n, c, k]."""
        g = _monomial_grad(self._u(r), self.expo) / self.radius  # (3k, M, N)
        return np.einsum("tcm,kmn->tnck", coef, g)

    def force(self, coef, species, omega, r):
        """Cycle-averaged force (N, 3): -grad(pseudopotential) + q D."""
        f = self.evaluate(coef, r)
        j = self.jacobian(coef, r)
        grad_psi = species.charge**2 / (2 * species.mass * omega**2) * (
            np.einsum("nck,nc->nk", j[0], f[0]) + np.einsum("nck,nc->nk", j[1], f[1])
        )
        return -grad_psi + species.charge * f[2]

    def stiffness(self, coef, species, omega, r, h=None):
        h = h or 1e-4 * self.radius
        r = np.asarray(r, dtype=float)
        k = np.empty((3, 3))
        for i in range(3):
            dr = np.zeros(3)
            dr[i] = h
            k[:, i] = -(self.force(coef, species, omega, r + dr)[0] - self.force(coef, species, omega, r - dr)[0]) / (2 * h)
        return 0.5 * (k + k.T)

    def equilibrium(self, coef, species, omega, guess=None, tol=1e-13, max_iter=50):
        """Zero of the cycle-averaged force and the stiffness matrix there."""
        r = self.center.copy() if guess is None else np.asarray(guess, dtype=float).copy()
        for _ in range(max_iter):
            k = self.stiffness(coef, species, omega, r)
            step = np.linalg.solve(k, self.force(coef, species, omega, r)[0])
            r = r + step
            if np.linalg.norm(step) < tol:
                break
        else:
            raise NoConvergence("cache equilibrium did not converge", last=r)
        k = self.stiffness(coef, species, omega, r)
        lam = np.linalg.eigvalsh(k)
        if np.any(lam <= 0):
            raise UnstableConfiguration(f"cycle-averaged stiffness not positive definite: {lam}")
        return r, k

    def boundary_error(self, drive: DriveConfig, n=200):
        """Max relative deviation from direct quadrature on the cache sphere.

        Computed separately for the RF phasor and (if present) the static
        DC field, each normalized by its largest exact magnitude there.
        """
        pts = self.center + self.radius * _fibonacci_sphere(n)
        coef = self.combine(drive)
        f = self.evaluate(coef, pts)
        exact_rf = np.zeros((n, 3), dtype=complex)
        exact_dc = np.zeros((n, 3))
        w = drive.rf_weights
        for pid in self.ids:
            role = self.roles[pid]
            if role in w and w[role] != 0:
                exact_rf += w[role] * self.basis.field(pid, pts)
        for pid, volts in drive.dc_voltages.items():
            if volts:
                exact_dc += volts * self.basis.field(pid, pts)
        exact_dc += np.asarray(drive.stray_field, dtype=float)
        err = 0.0
        poly_rf = f[0] + 1j * f[1]
        ref = np.max(np.linalg.norm(exact_rf, axis=1))
        if ref > 0:
            err = max(err, np.max(np.linalg.norm(poly_rf - exact_rf, axis=1)) / ref)
        ref = np.max(np.linalg.norm(exact_dc, axis=1))
        if ref > 0:
            err = max(err, np.max(np.linalg.norm(f[2] - exact_dc, axis=1)) / ref)
        return float(err)

    def check(self, drive, tol=1e-3):
        err = self.boundary_error(drive)
        if err > tol:
            raise CacheAccuracyError(f"cache error {err:.2e} exceeds {tol:g} at the boundary")
        return err


# --------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class IntegratorSettings:
    """Integrator and steady-state parameters (SI units, angular rates)."""

    steps_per_cycle: int = 1000
    settle_damping: float = 2 * math.pi * 5e3
    measure_damping: float = 0.0
    measure_cycles: int = 20
    check_cycles: int = 10
    rel_tol: float = 0.01
    floor_amplitude: float = 0.5e-9
    max_settle_cycles: int = 20000
    record_stride: int = 10
    cache_radius: float = 50e-6
    cache_order: int = 4
    cache_tol: float = 1e-3

    def __post_init__(self):
        if self.steps_per_cycle < 100:
            raise ValueError("steps_per_cycle must be >= 100")
        if self.steps_per_cycle % self.record_stride:
            raise ValueError("record_stride must divide steps_per_cycle")
        if self.measure_cycles < 1 or self.check_cycles < 1:
            raise ValueError("cycle counts must be positive")


@dataclass
class TrajectoryResult:
    """Sampled trajectory; ``rms_amplitude`` is taken about ``mean_position``."""

    t: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    mean_position: np.ndarray
    rms_amplitude: float
    converged: bool
    omega_rf: float
    status: str = "ok"
    left_cache: bool = False
    settle_cycles: int = 0
    cycle_means: np.ndarray | None = None

    @property
    def samples(self):
        return list(zip(self.t, self.positions, self.velocities))

    @property
    def n_cycles(self):
        if len(self.t) < 2:
            return 0.0
        dt = self.t[1] - self.t[0]
        return (self.t[-1] - self.t[0] + dt) * self.omega_rf / (2 * math.pi)

    def rms_about(self, point):
        d = self.positions - np.asarray(point, dtype=float)
        return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


class _Batch:
    """Ions sharing one field polynomial and one RF clock."""

    STATUS = {0: "ok", 1: "ion-lost", 2: "step-instability"}

    def __init__(self, cache, coef, species, omega, spc, r0, v0, kernel=None):
        self.cache = cache
        self.coef = np.ascontiguousarray(coef, dtype=float)
        self.qm = species.charge / species.mass
        self.omega = omega
        self.spc = int(spc)
        self.dt = 2 * math.pi / omega / spc
        k = np.arange(spc)
        self.cos_tab = np.ascontiguousarray(np.cos(2 * math.pi * k / spc))
        self.sin_tab = np.ascontiguousarray(np.sin(2 * math.pi * k / spc))
        self.r = np.array(np.atleast_2d(r0), dtype=float, order="C")
        self.v = np.array(np.atleast_2d(v0), dtype=float, order="C")
        if np.any(self.r[:, 2] <= 0):
            raise IonLost("initial position must have z > 0")
        n = len(self.r)
        self.status = np.zeros(n, dtype=np.int32)
        self.umax = np.zeros(n)
        self.step = 0
        self.kernel = get_kernel(kernel)
        self.r_max = 5 * cache.scale

    def advance(self, n_steps, damping, stride=0):
        n = len(self.r)
        n_cyc = n_steps // self.spc
        n_rec = n_steps // stride if stride else 0
        cyc_r = np.full((n, n_cyc, 3), np.nan)
        cyc_v = np.full((n, n_cyc, 3), np.nan)
        rec = np.full((n, n_rec, 6), np.nan)
        t0 = self.step * self.dt
        self.kernel.integrate_batch(
            self.r, self.v, self.coef, self.cache.expo, np.ascontiguousarray(self.cache.center),
            1.0 / self.cache.radius, self.qm, self.cos_tab, self.sin_tab, int(self.step),
            self.dt, int(n_steps), float(damping), int(stride), 0.0, float(self.r_max),
            cyc_r, cyc_v, rec, self.status, self.umax,
        )
        self.step += n_steps
        t = t0 + self.dt * stride * (np.arange(n_rec) + 1) if stride else np.zeros(0)
        return cyc_r, cyc_v, rec, t

    @property
    def left_cache(self):
        return self.umax > 1.0

    def status_name(self, i):
        return self.STATUS[int(self.status[i])]


def _raise_status(batch, i=0):
    s = int(batch.status[i])
    if s == 1:
        raise IonLost("ion left the trap region")
    if s == 2:
        raise StepInstability("trajectory diverged (non-finite state)")


def _default_cache(layout, drive, guess, settings):
    basis = get_basis(layout)
    guess = np.asarray(guess, dtype=float)
    if drive.v1 > 0:
        if isinstance(basis, FieldBasis):
            center = find_node(basis, drive, guess)
        else:
            center = basis.center
    else:
        center = guess
    return FieldCache(basis, center, settings.cache_radius, settings.cache_order)


def integrate(
    layout,
    drive: DriveConfig,
    species: IonSpecies,
    initial,
    damping: float,
    duration: float,
    steps_per_cycle: int = 1000,
    *,
    cache: FieldCache | None = None,
    record_stride: int = 10,
    window_cycles: int | None = None,
    kernel: str | None = None,
) -> TrajectoryResult:
    """Integrate one trajectory from ``initial = (position, velocity)``.

    The result is sampled every ``record_stride`` steps.  Its mean
    position and RMS amplitude are computed over the last
    ``window_cycles`` complete RF cycles (all of them by default).
    """
    r0, v0 = (np.asarray(x, dtype=float) for x in initial)
    if r0[2] <= 0:
        raise IonLost("initial z must be positive")
    if steps_per_cycle < 100:
        raise ValueError("steps_per_cycle must be >= 100")
    if steps_per_cycle % record_stride:
        raise ValueError("record_stride must divide steps_per_cycle")
    if cache is None:
        cache = _default_cache(layout, drive, r0, IntegratorSettings(steps_per_cycle=steps_per_cycle))
    coef = cache.combine(drive)
    batch = _Batch(cache, coef, species, drive.omega_rf, steps_per_cycle, r0, v0, kernel)
    n_steps = int(round(duration / batch.dt))
    n_steps -= n_steps % record_stride
    cyc_r, _, rec, t = batch.advance(n_steps, damping, record_stride)
    _raise_status(batch)
    per_cycle = steps_per_cycle // record_stride
    n_full = len(t) // per_cycle
    if window_cycles is None:
        window_cycles = n_full
    window_cycles = min(window_cycles, n_full)
    pos, vel = rec[0, :, :3], rec[0, :, 3:]
    if window_cycles > 0:
        w = pos[len(t) - window_cycles * per_cycle :]
        mean = w.mean(axis=0)
        rms = float(np.sqrt(np.mean(np.sum((w - mean) ** 2, axis=1))))
    else:
        mean, rms = pos.mean(axis=0) if len(pos) else r0, float("nan")
    return TrajectoryResult(
        t=t, positions=pos, velocities=vel, mean_position=mean, rms_amplitude=rms,
        converged=False, omega_rf=drive.omega_rf, left_cache=bool(batch.left_cache[0]),
        cycle_means=cyc_r[0],
    )


def _settle_and_measure(batch, species, r_eq, stiffness, settings: IntegratorSettings):
    """Damp to steady state, then record ``measure_cycles`` undamped cycles.

    Secular energy per cycle is ``m |<v>|^2 / 2 + d.K.d / 2`` with ``<.>``
    the RF-cycle average and ``d = <r> - r_eq``.  The per-cycle value beats
    at the secular frequencies, so it is smoothed by a running mean over
    two periods of the slowest secular mode.  An ion has converged once the
    smoothed energy changes by less than ``rel_tol`` over ``check_cycles``
    cycles or falls below the floor set by ``floor_amplitude``.
    """
    spc = settings.steps_per_cycle
    n = len(batch.r)
    k_min = float(np.linalg.eigvalsh(stiffness)[0])
    e_floor = 0.5 * k_min * settings.floor_amplitude**2
    win = max(1, int(math.ceil(2 * batch.omega / math.sqrt(k_min / species.mass))))
    history = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    cycles = 0
    chunk = settings.check_cycles
    while not np.all(done | (batch.status != 0)) and cycles < settings.max_settle_cycles:
        cyc_r, cyc_v, _, _ = batch.advance(chunk * spc, settings.settle_damping)
        cycles += chunk
        for i in range(n):
            if done[i] or batch.status[i] != 0:
                continue
            d = cyc_r[i] - r_eq
            e = 0.5 * species.mass * np.sum(cyc_v[i] ** 2, axis=1) + 0.5 * np.einsum("ni,ij,nj->n", d, stiffness, d)
            history[i].extend(e.tolist())
            h = history[i]
            if len(h) < win + chunk:
                continue
            now = np.mean(h[-win:])
            before = np.mean(h[-win - chunk : -chunk])
            if now < e_floor or abs(now - before) < settings.rel_tol * before:
                done[i] = True
    cyc_r, _, rec, t = batch.advance(settings.measure_cycles * spc, settings.measure_damping, settings.record_stride)
    out = []
    for i in range(n):
        pos, vel = rec[i, :, :3], rec[i, :, 3:]
        ok = batch.status[i] == 0
        mean = pos.mean(axis=0) if ok else np.full(3, np.nan)
        rms = float(np.sqrt(np.mean(np.sum((pos - mean) ** 2, axis=1)))) if ok else float("nan")
        out.append(
            TrajectoryResult(
                t=t, positions=pos, velocities=vel, mean_position=mean, rms_amplitude=rms,
                converged=bool(done[i] and ok), omega_rf=batch.omega, status=batch.status_name(i),
                left_cache=bool(batch.left_cache[i]), settle_cycles=cycles, cycle_means=cyc_r[i],
            )
        )
    return out


def steady_state(
    layout,
    drive: DriveConfig,
    species: IonSpecies,
    start,
    velocity=None,
    *,
    cache: FieldCache | None = None,
    settings: IntegratorSettings = IntegratorSettings(),
    kernel: str | None = None,
) -> TrajectoryResult:
    """Settled trajectory over the measurement window (raises on failure)."""
    start = np.asarray(start, dtype=float)
    if cache is None:
        cache = _default_cache(layout, drive, start, settings)
    coef = cache.combine(drive)
    r_eq, k = cache.equilibrium(coef, species, drive.omega_rf)
    v0 = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
    batch = _Batch(cache, coef, species, drive.omega_rf, settings.steps_per_cycle, start, v0, kernel)
    (res,) = _settle_and_measure(batch, species, r_eq, k, settings)
    _raise_status(batch)
    if not res.converged:
        raise NoConvergence(f"secular energy not settled after {res.settle_cycles} cycles", last=res)
    if res.left_cache:
        warnings.warn("trajectory left the field-cache region", RuntimeWarning, stacklevel=2)
    return res


def steady_state_rms(layout, drive, species, start, velocity=None, *, reference=None, cache=None,
                     settings=IntegratorSettings(), kernel=None) -> float:
    """RMS amplitude over the measurement window.

    Taken about the window's mean position, or about ``reference`` when
    given (e.g. the unperturbed node, to include the static offset).
    """
    res = steady_state(layout, drive, species, start, velocity, cache=cache, settings=settings, kernel=kernel)
    return res.rms_amplitude if reference is None else res.rms_about(reference)


def micromotion_velocity(trajectory: TrajectoryResult, axis):
    """Amplitude and phase of the RF-frequency velocity component along ``axis``.

    ``v . axis ~ amplitude * cos(W t + phase)`` over the largest whole
    number of RF cycles in the record.
    """
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    t = np.asarray(trajectory.t)
    if len(t) < 2:
        raise InsufficientWindow("trajectory has no samples")
    dt = t[1] - t[0]
    per_cycle = int(round(2 * math.pi / trajectory.omega_rf / dt))
    n_cyc = len(t) // per_cycle
    if n_cyc < 10:
        raise InsufficientWindow(f"need >= 10 RF cycles, have {n_cyc}")
    sl = slice(len(t) - n_cyc * per_cycle, len(t))
    vp = trajectory.velocities[sl] @ axis
    c = 2 * np.mean(vp * np.exp(-1j * trajectory.omega_rf * t[sl]))
    return float(abs(c)), float(np.angle(c))


def secular_frequency_from_trajectory(trajectory: TrajectoryResult, axis):
    """Dominant frequency (rad/s) of the cycle-averaged motion along ``axis``."""
    x = np.asarray(trajectory.cycle_means) @ np.asarray(axis, dtype=float)
    x = x - x.mean()
    n = len(x)
    win = np.hanning(n)
    spec = np.abs(np.fft.rfft(x * win, 16 * n))
    k = int(np.argmax(spec[1:])) + 1
    if 1 <= k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1 : k + 2] + 1e-300)
        k = k + 0.5 * (a - c) / (a - 2 * b + c)
    cycle = 2 * math.pi / trajectory.omega_rf
    return 2 * math.pi * k / (16 * n * cycle)


# --------------------------------------------------------------------------
# Monte Carlo map


@dataclass
class MCMap:
    delta_rel_axis: np.ndarray
    theta_axis: np.ndarray
    rms: np.ndarray
    rms_std: np.ndarray
    n_ok: np.ndarray
    n_samples: int
    seed: int
    manifest: dict = field(default_factory=dict)

    @property
    def failed(self):
        return self.n_ok == 0

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("delta_rel,theta_rad,rms_m,rms_std_m,n_ok\n")
            for i, d in enumerate(self.delta_rel_axis):
                for j, th in enumerate(self.theta_axis):
                    fh.write(f"{d:.9g},{th:.9g},{self.rms[i, j]:.9g},{self.rms_std[i, j]:.9g},{int(self.n_ok[i, j])}\n")

    def write_manifest(self, path):
        write_manifest(path, self.manifest)


def _axis(rng, n):
    lo, hi = float(rng[0]), float(rng[1])
    if not math.isclose(lo, -hi, rel_tol=1e-12, abs_tol=0.0) and not (lo == hi == 0):
        raise ValueError("grid axes must be symmetric about 0")
    if n < 1:
        raise ValueError("grid size must be positive")
    return np.linspace(lo, hi, n) if n > 1 else np.zeros(1)


def initial_conditions(rng, center, n, species, jitter=1e-6, temperature=5e-3):
    """Uniform-ball position jitter and isotropic Maxwell velocities."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rad = jitter * rng.random(n) ** (1 / 3)
    pos = np.asarray(center) + d * rad[:, None]
    sigma = math.sqrt(constants.k * temperature / species.mass)
    vel = sigma * rng.normal(size=(n, 3))
    return pos, vel


def _mc_cell(args):
    cache, drive, species, node, ci, seed, n_samples, settings, jitter, temperature, kernel = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
    pos, vel = initial_conditions(rng, node, n_samples, species, jitter, temperature)
    coef = cache.combine(drive)
    try:
        r_eq, k = cache.equilibrium(coef, species, drive.omega_rf)
    except (NoConvergence, UnstableConfiguration):
        return np.full(n_samples, np.nan)
    batch = _Batch(cache, coef, species, drive.omega_rf, settings.steps_per_cycle, pos, vel, kernel)
    res = _settle_and_measure(batch, species, r_eq, k, settings)
    return np.array([tr.rms_about(node) if tr.converged else np.nan for tr in res])


def mc_map(
    layout,
    drive: DriveConfig,
    species: IonSpecies,
    delta_rel_range,
    theta_range,
    grid=(21, 21),
    n_samples=3,
    seed=0,
    *,
    settings: IntegratorSettings = IntegratorSettings(),
    node=None,
    cache: FieldCache | None = None,
    jitter=1e-6,
    temperature=5e-3,
    n_jobs=1,
    kernel=None,
) -> MCMap:
    """Mean RMS displacement from the unperturbed node over a drive-error grid.

    Cell ``(i, j)`` runs ``n_samples`` ions at ``delta * (1 + delta_rel[i])``
    and ``theta + theta_axis[j]``.  Each sample starts within ``jitter`` of
    the node with a thermal velocity at ``temperature``; its RMS is taken
    about the unperturbed node over the undamped measurement window, so
    both the static node shift and driven micromotion count.  Cells whose
    samples all fail are NaN with ``n_ok = 0``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    da = _axis(delta_rel_range, grid[0])
    ta = _axis(theta_range, grid[1])
    basis = get_basis(layout)
    if node is None:
        guess = basis.center + np.array([0.0, 0.0, 0.5 * basis.scale]) if isinstance(basis, FieldBasis) else basis.center
        node = find_node(basis, drive, guess) if isinstance(basis, FieldBasis) else basis.center
    node = np.asarray(node, dtype=float)
    if cache is None:
        cache = FieldCache(basis, node, settings.cache_radius, settings.cache_order)
    cache_err = max(
        cache.check(drive.replace(delta=drive.delta * (1 + d), theta=drive.theta + t), settings.cache_tol)
        for d in (da[0], da[-1]) for t in (ta[0], ta[-1])
    )
    jobs = []
    for i, d in enumerate(da):
        for j, th in enumerate(ta):
            dr = drive.replace(delta=drive.delta * (1 + d), theta=drive.theta + th)
            jobs.append((cache, dr, species, node, i * len(ta) + j, seed, n_samples, settings, jitter, temperature, kernel))
    if n_jobs == 1:
        results = [_mc_cell(a) for a in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_mc_cell, jobs))
    vals = np.array(results).reshape(len(da), len(ta), n_samples)
    ok = np.isfinite(vals)
    n_ok = ok.sum(axis=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rms = np.where(n_ok > 0, np.nanmean(np.where(ok, vals, np.nan), axis=2), np.nan)
        std = np.where(n_ok > 1, np.nanstd(np.where(ok, vals, np.nan), axis=2, ddof=1), np.nan)
    manifest = {
        "drive": {"omega_rf": drive.omega_rf, "v1": drive.v1, "delta": drive.delta, "theta": drive.theta,
                  "dc_voltages": dict(drive.dc_voltages), "stray_field": list(drive.stray_field)},
        "species": {"mass": species.mass, "charge": species.charge},
        "grid": {"delta_rel": [float(da[0]), float(da[-1]), len(da)], "theta_rad": [float(ta[0]), float(ta[-1]), len(ta)]},
        "n_samples": n_samples,
        "seed": seed,
        "node_m": node.tolist(),
        "integrator": asdict(settings),
        "initial_conditions": {"jitter_m": jitter, "temperature_K": temperature},
        "cache_boundary_error": cache_err,
        "kernel": kernel or KERNEL,
        "rms_reference": "unperturbed node",
    }
    return MCMap(da, ta, rms, std, n_ok, n_samples, seed, manifest)


def write_trajectory(path, traj: TrajectoryResult):
    with open(path, "w") as fh:
        fh.write("t_s,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s\n")
        for t, p, v in zip(traj.t, traj.positions, traj.velocities):
            fh.write(",".join(f"{x:.12g}" for x in (t, *p, *v)) + "\n")
