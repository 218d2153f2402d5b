"""Shelving telegraph statistics and RF-photon correlation signals.

The telegraph is a two-state Markov process (bright S, shelved dark D)
observed through Poisson photon counts in fixed bins.  The correlation
signal histograms scattered photons against RF phase; the first Fourier
component of that histogram vanishes when the ion sits at the RF node,
which drives the DC compensation loop.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .dynamics import (
    FieldCache,
    IntegratorSettings,
    _Batch,
    _monomials,
    _raise_status,
    _settle_and_measure,
    micromotion_velocity,
)
from .fields import SR88, DriveConfig, FieldBasis, FieldError, IonSpecies, NoConvergence, SpectrumResult, find_node, get_basis

D52_LIFETIME = 0.39  # s; external literature value for Sr+ 4D5/2, not a fit parameter

BRIGHT = True
DARK = False


class ThresholdDegenerate(ValueError):
    pass


class NoBrightTime(ValueError):
    pass


class BudgetExhausted(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# telegraph


@dataclass(frozen=True)
class TelegraphTrace:
    """Binned photon counts; ``true_states`` is the bright-majority state per bin."""

    bin_width: float
    counts: np.ndarray
    true_states: np.ndarray | None = None
    seed: int | None = None
    bright_fraction: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        c = np.asarray(self.counts)
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")

    @property
    def duration(self):
        return len(self.counts) * self.bin_width

    @property
    def t(self):
        return np.arange(len(self.counts)) * self.bin_width

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "counts"])
            for t, c in zip(self.t, self.counts):
                w.writerow([f"{t:.9g}", int(c)])


def _switch_times(rng, r_shelve, gamma_decay, duration, start_bright=True):
    """Jump times of the two-state process on [0, duration]."""
    times = []
    t = 0.0
    bright = start_bright
    while True:
        rate = r_shelve if bright else gamma_decay
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        times.append(t)
        bright = not bright
    return np.array(times)


def bright_time_per_bin(switches, n_bins, bin_width, start_bright=True):
    """Exact time spent bright inside each bin for the given jump times."""
    edges = np.arange(n_bins + 1) * bin_width
    # cumulative bright time B(t) is piecewise linear; evaluate at the edges
    knots = np.concatenate([[0.0], switches, [edges[-1]]])
    state = np.array([(k % 2 == 0) == start_bright for k in range(len(knots) - 1)])
    seg = np.diff(knots) * state
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    b_edges = np.interp(edges, knots, cum)
    return np.diff(b_edges)


def simulate_telegraph(r_shelve, gamma_decay, r_bright, r_dark, bin_width, duration, seed, start_bright=True):
    """Exact continuous-time telegraph observed through Poisson-counting bins.

    The ion starts bright (freshly cooled) unless ``start_bright`` is False.
    Mean counts per bin are ``r_bright * t_bright + r_dark * t_dark``.
    """
    for name, v in (("r_shelve", r_shelve), ("gamma_decay", gamma_decay), ("r_bright", r_bright), ("r_dark", r_dark)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    if not r_bright > r_dark:
        raise ValueError("r_bright must exceed r_dark")
    if not bin_width > 0 or not duration > 0:
        raise ValueError("bin_width and duration must be positive")
    n_bins = int(round(duration / bin_width))
    rng = np.random.default_rng(seed)
    sw = _switch_times(rng, r_shelve, gamma_decay, n_bins * bin_width, start_bright)
    tb = bright_time_per_bin(sw, n_bins, bin_width, start_bright)
    frac = np.clip(tb / bin_width, 0.0, 1.0)
    mean = r_bright * tb + r_dark * (bin_width - tb)
    counts = rng.poisson(mean)
    return TelegraphTrace(bin_width, counts, frac >= 0.5, seed, frac)


def dwell_times(switches, duration, start_bright=True):
    """Complete bright and dark dwell durations from jump times."""
    edges = np.concatenate([[0.0], switches, [duration]])
    d = np.diff(edges)[1:-1]  # drop the censored first and last dwells
    first_bright_after = not start_bright  # state after the first jump
    idx = np.arange(len(d))
    is_bright = (idx % 2 == 0) == first_bright_after
    return d[is_bright], d[~is_bright]


def split_threshold(counts, max_iter=100):
    """Two-component split: iterate the midpoint of the two cluster means."""
    c = np.asarray(counts, dtype=float)
    if c.size == 0 or c.max() == c.min():
        raise ThresholdDegenerate("counts do not separate into two levels")
    thr = 0.5 * (c.min() + c.max())
    for _ in range(max_iter):
        lo, hi = c[c < thr], c[c >= thr]
        new = 0.5 * (lo.mean() + hi.mean())
        if new == thr:
            break
        thr = new
    return float(thr)


def poisson_threshold(mean_bright, mean_dark):
    """Count at which the bright and dark Poisson likelihoods are equal.

    ``counts >= threshold`` is then the maximum-likelihood bright decision
    for known per-bin means.
    """
    if not mean_bright > mean_dark >= 0:
        raise ValueError("need mean_bright > mean_dark >= 0")
    if mean_dark == 0:
        return 1.0
    return float((mean_bright - mean_dark) / math.log(mean_bright / mean_dark))


def detect_states(trace, threshold=None):
    """Bright where ``counts >= threshold``.

    The default threshold comes from :func:`split_threshold`.  A trace with
    no photons at all is classified dark throughout.
    """
    counts = np.asarray(trace.counts if isinstance(trace, TelegraphTrace) else trace)
    cmax = counts.max() if counts.size else 0
    if cmax == 0:
        return np.zeros(counts.shape, dtype=bool)
    if threshold is None:
        threshold = split_threshold(counts)
    if not (0 < threshold <= cmax):
        raise ThresholdDegenerate(f"threshold {threshold} outside (0, {cmax}]")
    return counts >= threshold


def debounce(states, max_blip=1):
    """Fill dark runs of at most ``max_blip`` bins enclosed by bright bins."""
    s = np.asarray(states, dtype=bool).copy()
    n = len(s)
    i = 0
    while i < n:
        if s[i]:
            i += 1
            continue
        j = i
        while j < n and not s[j]:
            j += 1
        if i > 0 and j < n and j - i <= max_blip:
            s[i:j] = True
        i = j
    return s


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    stderr: float
    n_transitions: int
    bright_time: float

    @property
    def stderr_defined(self):
        return self.n_transitions >= 1

    def as_dict(self):
        return {
            "rate_per_s": self.rate,
            "stderr_per_s": self.stderr,
            "n_transitions": self.n_transitions,
            "bright_time_s": self.bright_time,
            "stderr_defined": self.stderr_defined,
        }


def shelving_rate_estimate(states, bin_width, debounce_bins=0):
    """Bright-to-dark transitions per total bright time.

    ``debounce_bins > 0`` first fills dark blips of that many bins or fewer.
    """
    s = np.asarray(states, dtype=bool)
    if debounce_bins:
        s = debounce(s, debounce_bins)
    n_bright = int(s.sum())
    if n_bright == 0:
        raise NoBrightTime("no bright bins")
    n = int(np.count_nonzero(s[:-1] & ~s[1:]))
    t_b = n_bright * bin_width
    rate = n / t_b
    err = rate / math.sqrt(n) if n >= 1 else float("nan")
    return RateEstimate(rate, err, n, t_b)


def write_estimate(path, est, extra=None):
    """Flat ``key = value`` document."""
    d = dict(est.as_dict())
    d.update(extra or {})
    with open(path, "w") as fh:
        for k, v in d.items():
            fh.write(f"{k} = {v}\n")


# --------------------------------------------------------------------------
# correlation signal


@dataclass(frozen=True)
class Line:
    """Cooling transition probed by a beam with wave vector ``k_vector`` (rad/m)."""

    linewidth: float
    detuning: float
    k_vector: tuple

    def __post_init__(self):
        if not self.linewidth > 0:
            raise ValueError("linewidth must be positive")
        object.__setattr__(self, "k_vector", tuple(float(v) for v in self.k_vector))

    def lorentzian(self, x):
        return 1.0 / (1.0 + 4.0 * (np.asarray(x) / self.linewidth) ** 2)


def default_probe_lines(detuning=None):
    """Two probes: one horizontal at 45 deg to x, one rising at 45 deg in the y-z plane mix."""
    return [
        sr_cooling_line((1.0, 1.0, 0.0), detuning),
        sr_cooling_line((-1.0, 1.0, math.sqrt(2.0)), detuning),
    ]


def sr_cooling_line(direction=(1.0, 0.0, 0.0), detuning=None):
    """Sr+ 422 nm line (2 pi x 20.2 MHz), half-linewidth red detuned by default."""
    gam = 2 * math.pi * 20.2e6
    k = 2 * math.pi / 421.7e-9
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return Line(gam, -gam / 2 if detuning is None else detuning, tuple(k * d))


@dataclass(frozen=True)
class CorrelationSignal:
    phase_bins: np.ndarray
    modulation_depth: float
    modulation_phase: float
    second_harmonic_depth: float = 0.0
    velocity_amplitude: float = 0.0

    @property
    def bin_centers(self):
        n = len(self.phase_bins)
        return (np.arange(n) + 0.5) * 2 * math.pi / n

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase_rad", "counts"])
            for p, c in zip(self.bin_centers, self.phase_bins):
                w.writerow([f"{p:.9g}", int(c)])


def harmonic_depth(counts, harmonic=1):
    """``2 |sum c_j exp(-i h phi_j)| / sum c_j`` and the phase of that component."""
    c = np.asarray(counts, dtype=float)
    n = len(c)
    tot = c.sum()
    if tot == 0:
        return 0.0, 0.0
    phi = (np.arange(n) + 0.5) * 2 * math.pi / n
    f = np.sum(c * np.exp(-1j * harmonic * phi))
    return float(2 * abs(f) / tot), float(-np.angle(f))


def photon_histogram(line: Line, kv_amplitude, kv_phase, n_photons, seed, n_bins=32, block=1 << 16):
    """Photon RF phases for ``R(phi) ~ L(detuning - A cos(phi + phase))``, by thinning.

    Candidate phases are uniform; each is kept with probability
    ``R(phi) / R_max`` where ``R_max`` is the exact peak over the cycle.
    """
    if n_photons < 1:
        raise ValueError("n_photons must be >= 1")
    a = abs(kv_amplitude)
    det = line.detuning
    peak = 1.0 if abs(det) <= a else float(line.lorentzian(abs(det) - a))
    rng = np.random.default_rng(seed)
    counts = np.zeros(n_bins, dtype=np.int64)
    need = int(n_photons)
    # fixed-size candidate blocks keep the random stream aligned between
    # nearby parameter values (common random numbers)
    while need > 0:
        phi = rng.random(block) * 2 * math.pi
        u = rng.random(block)
        keep = u * peak < line.lorentzian(det - a * np.cos(phi + kv_phase))
        phi = phi[keep][:need]
        counts += np.bincount((phi * n_bins / (2 * math.pi)).astype(int) % n_bins, minlength=n_bins)
        need -= len(phi)
    return counts


def _signal_from_trajectory(traj, line, n_photons, seed, n_bins):
    k = np.asarray(line.k_vector)
    kn = np.linalg.norm(k)
    amp, ph = micromotion_velocity(traj, k / kn)
    counts = photon_histogram(line, kn * amp, ph, n_photons, seed, n_bins)
    d1, p1 = harmonic_depth(counts, 1)
    d2, _ = harmonic_depth(counts, 2)
    return CorrelationSignal(counts, d1, p1, d2, amp)


def _settled_trajectory(cache, drive, species, settings, kernel=None):
    coef = cache.combine(drive)
    r_eq, k = cache.equilibrium(coef, species, drive.omega_rf)
    batch = _Batch(cache, coef, species, drive.omega_rf, settings.steps_per_cycle, r_eq, np.zeros(3), kernel)
    (res,) = _settle_and_measure(batch, species, r_eq, k, settings)
    _raise_status(batch)
    if not res.converged:
        raise NoConvergence("trajectory did not settle", last=res)
    return res, r_eq


CORRELATION_SETTINGS = IntegratorSettings(measure_cycles=20)


def correlation_signal(
    displacement,
    drive: DriveConfig,
    spectrum: SpectrumResult,
    line: Line,
    n_photons: int,
    seed,
    *,
    layout=None,
    species: IonSpecies = SR88,
    cache: FieldCache | None = None,
    n_bins: int = 32,
    settings: IntegratorSettings = CORRELATION_SETTINGS,
) -> CorrelationSignal:
    """Photon/RF-phase correlation for an ion held at ``node + displacement``.

    A uniform static field is added so that the cycle-averaged force
    vanishes at the displaced point; the ion's steady trajectory there
    supplies the RF-frequency velocity projected on ``line.k_vector``.
    """
    node = np.asarray(spectrum.node_position, dtype=float)
    if cache is None:
        if layout is None:
            raise ValueError("need a layout or a field cache")
        cache = FieldCache(get_basis(layout), node, settings.cache_radius, settings.cache_order)
    target = node + np.asarray(displacement, dtype=float)
    if np.linalg.norm(target - cache.center) > cache.radius:
        raise ValueError("displacement outside the field-cache region")
    coef = cache.combine(drive)
    f = cache.force(coef, species, drive.omega_rf, target)[0]
    hold = np.asarray(drive.stray_field, dtype=float) - f / species.charge
    held = drive.replace(stray_field=tuple(hold))
    traj, _ = _settled_trajectory(cache, held, species, settings)
    return _signal_from_trajectory(traj, line, n_photons, seed, n_bins)


# --------------------------------------------------------------------------
# compensation


def compensation_basis(cache: FieldCache, electrodes, node, components=(0, 1)):
    """Minimum-norm DC voltage vectors producing unit field components at ``node``.

    Returns an array (len(components), len(electrodes)); row ``k`` yields
    ``E = e_{components[k]}`` (V/m) and zero in the other two components.
    """
    u = (np.asarray(node, dtype=float) - cache.center) / cache.radius
    mono = _monomials(u, cache.expo)[:, 0]
    g = np.column_stack([cache.coef[e] @ mono for e in electrodes])  # (3, n_el)
    if np.linalg.matrix_rank(g) < 3:
        raise ValueError("DC electrodes cannot synthesize independent fields at the node")
    pinv = np.linalg.pinv(g)
    return np.array([pinv[:, c] for c in components])


@dataclass
class CompensationResult:
    voltages: dict
    coordinates: np.ndarray  # applied field components (V/m) along the DOFs
    objective: float
    n_evaluations: int
    budget_exhausted: bool
    equilibrium: np.ndarray
    displacement: np.ndarray
    depths: list

    def __getitem__(self, k):
        return self.voltages[k]


def compensate(
    layout,
    drive: DriveConfig,
    species: IonSpecies,
    line,
    initial_dc: dict | None = None,
    bounds=(-50.0, 50.0),
    budget: int = 600,
    *,
    n_photons: int = 100_000,
    seed: int = 0,
    node=None,
    cache: FieldCache | None = None,
    electrodes=None,
    components=(0, 1),
    search: float = 15.0,
    n_grid: int = 11,
    n_starts: int = 3,
    xatol: float = 1e-3,
    settings: IntegratorSettings = CORRELATION_SETTINGS,
) -> CompensationResult:
    """Null the correlation signal over two synthesized DC field components.

    The degrees of freedom are the field components ``components`` (V/m)
    added at the node, each realized by the minimum-norm voltage pattern
    over the DC electrodes.  The objective is the summed squared
    first-harmonic depth over the probe ``line`` (one or several), with the
    same photon seed at every evaluation so that it is deterministic.

    The depth of a single probe peaks once the Doppler modulation exceeds
    the linewidth and falls again further out, so a simplex started far
    from the node can walk away from it.  The search therefore scans an
    ``n_grid`` x ``n_grid`` lattice of half-width ``search`` around the
    start and runs Nelder-Mead from each of the ``n_starts`` best lattice
    points, keeping the overall best.  Both stages
    count against ``budget``; when it runs out the best point so far is
    returned with ``budget_exhausted`` set.
    """
    lines = [line] if isinstance(line, Line) else list(line)
    basis = get_basis(layout)
    electrodes = list(electrodes or basis.ids_with_role("DC"))
    initial_dc = {e: float((initial_dc or {}).get(e, 0.0)) for e in electrodes}
    lo, hi = bounds
    if any(not (lo <= v <= hi) for v in initial_dc.values()):
        raise ValueError("initial_dc outside bounds")
    if node is None:
        guess = basis.center + np.array([0.0, 0.0, 0.5 * basis.scale]) if isinstance(basis, FieldBasis) else basis.center
        bare = drive.replace(dc_voltages={}, stray_field=(0.0, 0.0, 0.0))
        node = find_node(basis, bare, guess) if isinstance(basis, FieldBasis) else basis.center
    node = np.asarray(node, dtype=float)
    if cache is None:
        cache = FieldCache(basis, node, settings.cache_radius, settings.cache_order)
    pattern = compensation_basis(cache, electrodes, node, components)
    v0 = np.array([initial_dc[e] for e in electrodes])
    n = len(components)
    best = {"f": math.inf, "x": np.zeros(n), "depths": None, "r": None}
    n_eval = [0]

    class _Spent(Exception):
        pass

    def objective(x):
        v = v0 + np.asarray(x) @ pattern
        if np.any(v < lo) or np.any(v > hi):
            return 1e6 + float(np.sum(np.clip(lo - v, 0, None) + np.clip(v - hi, 0, None)))
        if n_eval[0] >= budget:
            raise _Spent
        n_eval[0] += 1
        dr = drive.replace(dc_voltages={**drive.dc_voltages, **dict(zip(electrodes, v))})
        try:
            traj, r_eq = _settled_trajectory(cache, dr, species, settings)
        except FieldError:  # unstable or lost: strongly disfavoured
            return 1e3
        if np.linalg.norm(r_eq - cache.center) > 0.5 * cache.radius:
            return 1e3  # outside the region where the cached field is trusted
        depths = [_signal_from_trajectory(traj, ln, n_photons, seed + i, 32).modulation_depth for i, ln in enumerate(lines)]
        f = float(np.sum(np.square(depths)))
        if f < best["f"]:
            best.update(f=f, x=np.array(x, dtype=float), depths=depths, r=r_eq)
        return f

    grid_vals = []
    try:
        starts = [np.zeros(n)]
        if n_grid > 1 and search > 0:
            g = np.linspace(-search, search, n_grid)
            for pt in np.stack(np.meshgrid(*([g] * n), indexing="ij"), -1).reshape(-1, n):
                grid_vals.append((objective(pt), tuple(pt)))
            grid_vals.sort()
            starts = [np.array(p) for _, p in grid_vals[:n_starts]]
        step = 2 * search / max(n_grid - 1, 1) if search > 0 else 1.0
        for x0 in starts:
            simplex = np.vstack([x0, x0 + step * np.eye(n)])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                optimize.minimize(
                    objective, x0, method="Nelder-Mead",
                    options={"initial_simplex": simplex, "xatol": xatol, "fatol": 0.0, "maxfev": 10 * budget},
                )
        exhausted = False
    except _Spent:
        exhausted = True
        warnings.warn("compensation budget exhausted; returning best point", BudgetExhausted, stacklevel=2)
    v = v0 + best["x"] @ pattern
    r_eq = best["r"] if best["r"] is not None else node
    return CompensationResult(
        voltages=dict(zip(electrodes, map(float, v))),
        coordinates=best["x"],
        objective=best["f"],
        n_evaluations=n_eval[0],
        budget_exhausted=exhausted,
        equilibrium=r_eq,
        displacement=r_eq - node,
        depths=best["depths"] or [],
    )


def compensation_field(cache: FieldCache, voltages: dict, node):
    """Static field (V/m) that ``voltages`` produce at ``node``."""
    u = (np.asarray(node, dtype=float) - cache.center) / cache.radius
    mono = _monomials(u, cache.expo)[:, 0]
    return sum(v * (cache.coef[e] @ mono) for e, v in voltages.items())
