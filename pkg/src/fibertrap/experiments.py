"""Config-driven end-to-end scans and their manifests.

Every ``run_*`` function computes in memory and returns result objects;
nothing touches the filesystem until a ``write_*`` helper (or the CLI) is
called, so a failing run leaves no partial outputs.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import config as cfgmod
from . import fitting
from .dynamics import FieldCache, MCMap, mc_map, micromotion_velocity, steady_state
from .fields import FieldError, _rf_jacobian, find_node, get_basis, rf_field_phasor, secular_spectrum
from .manifest import versions, write_manifest
from .optics import (
    charging_magnitude,
    displacement_from_field,
    intensity,
    peak_intensity,
    waist_at,
)
from .photostats import (
    NoBrightTime,
    RateEstimate,
    ThresholdDegenerate,
    detect_states,
    poisson_threshold,
    shelving_rate_estimate,
    simulate_telegraph,
)
from .rfnetwork import ratio, sensitivity, write_sweep


class ScanError(FieldError):
    """A scan could not produce enough valid points."""


@dataclass
class ScanResult:
    independent: np.ndarray
    dependent: np.ndarray
    errors: np.ndarray | None = None
    independent_label: str = "x"
    dependent_label: str = "y"
    metadata: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.independent = np.asarray(self.independent, dtype=float)
        self.dependent = np.asarray(self.dependent, dtype=float)
        n = len(self.independent)
        if len(self.dependent) != n:
            raise ValueError("independent and dependent lengths differ")
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float)
            if len(self.errors) != n:
                raise ValueError("errors length differs")
            if np.any(self.errors[np.isfinite(self.errors)] < 0):
                raise ValueError("errors must be non-negative")
        for k, v in self.columns.items():
            if len(v) != n:
                raise ValueError(f"column {k!r} length differs")

    def __len__(self):
        return len(self.independent)

    def write_csv(self, path):
        head = [self.independent_label, self.dependent_label]
        cols = [self.independent, self.dependent]
        if self.errors is not None:
            head.append(self.dependent_label + "_err")
            cols.append(self.errors)
        for k, v in self.columns.items():
            head.append(k)
            cols.append(np.asarray(v))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for row in zip(*cols):
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.12g}"


def base_manifest(cfg, seed, experiment):
    return {
        "experiment": experiment,
        "seed": seed,
        "config_hash": cfgmod.config_hash(cfg),
        "versions": versions(),
        "config": cfg,
    }


def write_fit(path, fits: dict, extra=None):
    """Flat ``key = value`` document of one or more fits."""
    d = {}
    for name, fr in fits.items():
        d.update({f"{name}.{k}": v for k, v in fr.as_dict().items()})
    d.update(extra or {})
    write_manifest(path, d)


# --------------------------------------------------------------------------
# shared context


@dataclass
class _Context:
    cfg: dict
    basis: object
    drive: object
    species: object
    guess: np.ndarray


def _context(cfg):
    layout = cfgmod.layout_from_config(cfg)
    basis = get_basis(layout, cfg["trap"]["max_cell"], cfg["trap"]["gap_model"])
    return _Context(cfg, basis, cfgmod.drive_from_config(cfg), cfgmod.species_from_config(cfg),
                    np.asarray(cfg["drive"]["node_guess"], dtype=float))


def _seed_for(seed, *k):
    return np.random.SeedSequence([int(seed), *k])


# --------------------------------------------------------------------------
# spectrum and node scan


def run_spectrum(cfg, seed=0):
    """Node and secular spectrum for the configured drive."""
    ctx = _context(cfg)
    spec = secular_spectrum(ctx.basis, ctx.drive, ctx.species, guess=ctx.guess, step=cfg["solver"]["hessian_step"])
    manifest = base_manifest(cfg, seed, "spectrum")
    manifest["result"] = spec.as_dict()
    return spec, manifest


def _network_drive(cfg, ctx, cv_pF):
    r = ratio(cfgmod.network_from_config(cfg, cv=cv_pF), ctx.drive.omega_rf)
    return ctx.drive.replace(delta=r.delta, theta=r.theta)


def run_node_scan(cfg, seed=0):
    """Node position versus Cv through the RF network (continuation from large Cv)."""
    ctx = _context(cfg)
    cvs = np.asarray(cfg["network"]["cv_sweep_pF"], dtype=float)
    if cvs.size == 0:
        raise cfgmod.ConfigError("[network] cv_sweep_pF is empty")
    n = len(cvs)
    nodes = np.full((n, 3), np.nan)
    deltas = np.empty(n)
    thetas = np.empty(n)
    ok = np.zeros(n, dtype=bool)
    guess = ctx.guess
    for i in np.argsort(-cvs, kind="stable"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            dr = _network_drive(cfg, ctx, cvs[i])
        deltas[i], thetas[i] = dr.delta, dr.theta
        try:
            nodes[i] = find_node(ctx.basis, dr, guess)
            ok[i] = True
            guess = nodes[i]
        except FieldError:
            pass
    if not ok.any():
        raise ScanError("no node found for any Cv")
    manifest = base_manifest(cfg, seed, "node-scan")
    manifest["n_failed"] = int((~ok).sum())
    res = ScanResult(
        cvs * 1e-12, nodes[:, 2], None, "cv_F", "node_z_m", manifest,
        {"delta": deltas, "theta_rad": thetas, "node_x_m": nodes[:, 0], "node_y_m": nodes[:, 1], "ok": ok},
    )
    return res


# --------------------------------------------------------------------------
# shelving-rate measurement shared by mode and power scans


def _measure_rate(cfg, rate_true, seed_seq, duration=None):
    """Telegraph simulation and estimate; noiseless configs return the truth."""
    s = cfg["scan"]
    duration = s["duration"] if duration is None else duration
    gamma = 1.0 / s["d_lifetime"]
    if not cfg["noise"]["poisson"]:
        t_b = duration * gamma / (rate_true + gamma)
        return RateEstimate(rate_true, 0.0, 0, t_b)
    trace = simulate_telegraph(rate_true, gamma, s["r_bright"], s["r_dark"], s["bin_width"], duration, seed_seq)
    thr = s["threshold"] or poisson_threshold(s["r_bright"] * s["bin_width"], s["r_dark"] * s["bin_width"])
    states = detect_states(trace, thr)
    return shelving_rate_estimate(states, s["bin_width"], int(s["debounce_bins"]))


def _irls_gaussian(x, y, t_bright, waist=None, n_iter=4, noiseless=False):
    """Gaussian fit with Poisson-like model weights ``var = max(f, f_min) / T_bright``.

    Weights from the data (``sqrt(y)``) bias the width low; recomputing
    them from the fitted model removes that bias.
    """
    if noiseless:
        return fitting.fit_gaussian(x, y, waist=waist), None
    floor = 0.5 / t_bright
    sig = np.sqrt(np.maximum(y, floor) / t_bright)
    res = fitting.fit_gaussian(x, y, sig, waist=waist)
    for _ in range(n_iter):
        if not res.converged:
            break
        p = res.parameters
        model = fitting.gaussian(x, p["center"], p["waist"], p["amplitude"], p["offset"])
        sig = np.sqrt(np.maximum(model, floor) / t_bright)
        res = fitting.fit_gaussian(x, y, sig, waist=waist, p0=p if waist is None else {k: v for k, v in p.items() if k != "waist"})
    return res, sig


# --------------------------------------------------------------------------
# mode scan


def _beam_geometry(cfg, ref_node):
    b = cfg["beam"]
    axis = np.asarray(b["offset_axis"], dtype=float)
    if abs(axis[2]) > 1e-12 or not np.linalg.norm(axis) > 0:
        raise cfgmod.ConfigError("[beam] offset_axis must be a non-zero in-plane vector")
    axis = axis / np.linalg.norm(axis)
    height = ref_node[2] if cfg["scan"]["height_mode"] == "node" else b["calibration_height"]
    probe = cfgmod.beam_from_config(cfg)
    w_ion = waist_at(probe, height)
    origin = np.array([ref_node[0], ref_node[1], 0.0]) + b["offset_waists"] * w_ion * axis
    beam = probe.replace(origin=tuple(origin))
    k = b["shelving_k"] or cfg["scan"]["peak_rate"] / peak_intensity(beam, height)
    return beam, axis, height, w_ion, k


def _scan_deltas(cfg, ctx, ref_drive, ref_node, axis, target_s):
    """RF ratios whose nodes land on ``target_s`` along ``axis``.

    A coarse map s(delta) by continuation, inverted by interpolation; the
    scan then uses the exact node at each interpolated delta.
    """
    d_ref = ref_drive.delta
    grid = np.geomspace(0.4 * d_ref, 2.5 * d_ref, 40)
    s_grid = np.full(len(grid), np.nan)
    i0 = int(np.argmin(abs(grid - d_ref)))
    for order in (range(i0, len(grid)), range(i0 - 1, -1, -1)):
        guess = ref_node
        for i in order:
            try:
                node = find_node(ctx.basis, ref_drive.replace(delta=grid[i]), guess)
            except FieldError:
                break
            if node[2] < 0.25 * ref_node[2]:
                break
            s_grid[i] = node @ axis
            guess = node
    ok = np.isfinite(s_grid)
    g, s = grid[ok], s_grid[ok]
    if len(g) < 4 or not (np.all(np.diff(s) > 0) or np.all(np.diff(s) < 0)):
        raise ScanError("node position is not monotonic in delta over the scan")
    order = np.argsort(s)
    s, g = s[order], g[order]
    if target_s.min() < s[0] or target_s.max() > s[-1]:
        raise ScanError(f"scan targets [{target_s.min():.3g}, {target_s.max():.3g}] m outside reachable "
                        f"node range [{s[0]:.3g}, {s[-1]:.3g}] m")
    return np.interp(target_s, s, g), (s, g)


@dataclass
class ModeScanReport:
    fit: fitting.FitResult
    fit_fixed_waist: fitting.FitResult
    truth_center: float
    truth_waist: float
    offset_waists: float
    offset_waists_err: float
    final_delta: float
    final_node: np.ndarray
    final_alignment_waists: float
    final_alignment_err_waists: float

    def as_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("fit", "fit_fixed_waist", "final_node")}
        d["final_node_m"] = np.asarray(self.final_node).tolist()
        return d


def run_mode_scan(cfg, seed=0):
    """Shelving rate versus RF-node position across the fiber mode.

    Returns ``(ScanResult, ModeScanReport)``.  The independent variable is
    the node coordinate along ``beam.offset_axis``; the fit reports the
    mode centre and waist, the initial fiber-ion offset in waists and the
    residual after moving the node to the fitted centre.
    """
    ctx = _context(cfg)
    s = cfg["scan"]
    ref_drive = ctx.drive.replace(delta=s["reference_delta"])
    ref_node = find_node(ctx.basis, ref_drive, ctx.guess)
    beam, axis, height, w_ion, k = _beam_geometry(cfg, ref_node)
    s_ref = ref_node @ axis
    s_fiber = np.asarray(beam.origin) @ axis

    if s["cv_pF"]:
        drives = [_network_drive(cfg, ctx, cv) for cv in s["cv_pF"]]
        smap = None
    else:
        if s["deltas"]:
            deltas = np.asarray(s["deltas"], dtype=float)
            smap = None
        else:
            if s["n_points"] < 5:
                raise cfgmod.ConfigError("[scan] n_points must be >= 5")
            targets = s_fiber + np.linspace(-1, 1, int(s["n_points"])) * s["range_waists"] * w_ion
            deltas, smap = _scan_deltas(cfg, ctx, ref_drive, ref_node, axis, targets)
        drives = [ref_drive.replace(delta=float(d)) for d in deltas]

    n = len(drives)
    if n < 5:
        raise cfgmod.ConfigError("mode scan needs at least 5 points")
    nodes = np.full((n, 3), np.nan)
    cols = {k_: np.full(n, np.nan) for k_ in ("rate_true_per_s", "intensity_W_m2", "bright_time_s", "rf_residual_V_m")}
    ntr = np.zeros(n, dtype=int)
    rate = np.full(n, np.nan)
    status = ["ok"] * n
    guess = ref_node
    for i, dr in enumerate(drives):
        try:
            node = find_node(ctx.basis, dr, guess)
        except FieldError as exc:
            status[i] = f"node:{type(exc).__name__}"
            continue
        guess = node
        nodes[i] = node
        cols["rf_residual_V_m"][i] = float(np.linalg.norm(rf_field_phasor(ctx.basis, dr, node)))
        pos = node if s["height_mode"] == "node" else np.array([node[0], node[1], height])
        cols["intensity_W_m2"][i] = intensity(beam, pos)
        r_true = k * cols["intensity_W_m2"][i]
        cols["rate_true_per_s"][i] = r_true
        try:
            est = _measure_rate(cfg, r_true, _seed_for(seed, 1, i))
        except (NoBrightTime, ThresholdDegenerate) as exc:
            status[i] = f"rate:{type(exc).__name__}"
            continue
        rate[i] = est.rate
        ntr[i] = est.n_transitions
        cols["bright_time_s"][i] = est.bright_time
    x = nodes @ axis
    good = np.isfinite(rate) & np.isfinite(x)
    if good.sum() < 5:
        raise ScanError(f"only {int(good.sum())} valid scan points")
    noiseless = not cfg["noise"]["poisson"]
    xg, yg, tb = x[good], rate[good], cols["bright_time_s"][good]
    fit, sig = _irls_gaussian(xg, yg, tb, noiseless=noiseless)
    fit_fixed, _ = _irls_gaussian(xg, yg, tb, waist=w_ion, noiseless=noiseless)
    err = np.full(n, np.nan)
    if sig is not None:
        err[good] = sig
    else:
        err[good] = 0.0

    c, w = fit["center"], fit["waist"]
    sc, sw = fit.uncertainties["center"], fit.uncertainties["waist"]
    off = (c - s_ref) / w
    off_err = math.hypot(sc / w, off * sw / w) if fit.converged else float("nan")
    # move the node onto the fitted centre
    if smap is not None:
        d_star = float(np.interp(c, *smap))
    else:
        order = np.argsort(x[good])
        d_star = float(np.interp(c, x[good][order], np.array([d.delta for d in drives])[good][order]))
    try:
        final_node = find_node(ctx.basis, ref_drive.replace(delta=d_star), ref_node)
        final = abs(final_node @ axis - s_fiber) / w_ion
    except FieldError:
        final_node, final = np.full(3, np.nan), float("nan")
    report = ModeScanReport(fit, fit_fixed, float(s_fiber), float(w_ion), float(off), float(off_err), d_star,
                            final_node, float(final), float(sc / w))

    manifest = base_manifest(cfg, seed, "mode-scan")
    manifest.update({
        "reference_node_m": ref_node.tolist(),
        "beam_origin_m": list(beam.origin),
        "beam_w0_m": beam.waist_w0,
        "probe_height_m": float(height),
        "shelving_k": float(k),
        "n_failed": int((~good).sum()),
        "report": report.as_dict(),
    })
    result = ScanResult(
        x, rate, err, "node_s_m" if not np.allclose(axis, [0, 1, 0]) else "node_y_m", "rate_per_s", manifest,
        {"delta": np.array([d.delta for d in drives]), "theta_rad": np.array([d.theta for d in drives]),
         "node_x_m": nodes[:, 0], "node_y_m": nodes[:, 1], "node_z_m": nodes[:, 2], **cols,
         "n_transitions": ntr, "status": np.array(status)},
    )
    return result, report


# --------------------------------------------------------------------------
# power scan


def run_power_scan(cfg, seed=0):
    """Shelving rate versus beam power with the ion on the fiber axis.

    Returns ``(ScanResult, FitResult)``; ``stats`` of the line fit carry the
    expected slope ``k * I_peak / P`` and the intercept significance.
    """
    ctx = _context(cfg)
    powers = np.asarray(cfg["scan"]["powers"], dtype=float)
    if len(powers) < 4 or np.any(powers <= 0):
        raise cfgmod.ConfigError("[scan] powers needs >= 4 positive values")
    ref_drive = ctx.drive.replace(delta=cfg["scan"]["reference_delta"])
    node = find_node(ctx.basis, ref_drive, ctx.guess)
    beam = cfgmod.beam_from_config(cfg, origin=(node[0], node[1], 0.0))
    k = cfg["beam"]["shelving_k"] or cfg["scan"]["peak_rate"] / peak_intensity(beam, node[2])
    rate = np.empty(len(powers))
    err = np.empty(len(powers))
    truth = np.empty(len(powers))
    ntr = np.zeros(len(powers), dtype=int)
    for i, p in enumerate(powers):
        truth[i] = k * intensity(beam.replace(power=p), node)
        est = _measure_rate(cfg, truth[i], _seed_for(seed, 2, i), cfg["scan"]["power_duration"])
        rate[i], err[i], ntr[i] = est.rate, est.stderr, est.n_transitions
    noiseless = not cfg["noise"]["poisson"]
    fit = fitting.fit_line(powers, rate, None if noiseless else err)
    expected = k * peak_intensity(beam.replace(power=1.0), node[2])
    fit.stats["expected_slope"] = float(expected)
    fit.stats["slope_rel_error"] = float(fit["slope"] / expected - 1)
    fit.stats["intercept_sigmas"] = (
        float(abs(fit["intercept"]) / fit.uncertainties["intercept"]) if fit.uncertainties["intercept"] > 0 else 0.0
    )
    manifest = base_manifest(cfg, seed, "power-scan")
    manifest.update({"node_m": node.tolist(), "shelving_k": float(k), "fit": fit.as_dict()})
    res = ScanResult(powers, rate, err if not noiseless else np.zeros_like(rate), "power_W", "rate_per_s", manifest,
                     {"rate_true_per_s": truth, "n_transitions": ntr})
    return res, fit


# --------------------------------------------------------------------------
# MC map


def contour_closed(mcmap: MCMap, level):
    """True when the region ``rms < level`` holding the origin cell avoids the grid border."""
    i0 = int(np.argmin(abs(mcmap.delta_rel_axis)))
    j0 = int(np.argmin(abs(mcmap.theta_axis)))
    rms = np.nan_to_num(mcmap.rms, nan=np.inf)
    lab, _ = ndimage.label(rms < level)
    if lab[i0, j0] == 0:
        return False
    comp = lab == lab[i0, j0]
    edge = comp[0].any() or comp[-1].any() or comp[:, 0].any() or comp[:, -1].any()
    return not edge


def contour_lines(mcmap: MCMap, step):
    """Iso-RMS polylines at multiples of ``step`` (needs the optional contourpy)."""
    import contourpy

    z = np.nan_to_num(mcmap.rms, nan=np.nanmax(mcmap.rms))
    gen = contourpy.contour_generator(mcmap.theta_axis, mcmap.delta_rel_axis, z)
    out = []
    lv = step
    while lv < np.nanmax(mcmap.rms):
        for k, line in enumerate(gen.lines(lv)):
            out.extend((lv, k, p[1], p[0]) for p in line)
        lv += step
    return out


def write_contours(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level_m", "line_id", "delta_rel", "theta_rad"])
        for lv, k, d, t in rows:
            w.writerow([f"{lv:.9g}", k, f"{d:.9g}", f"{t:.9g}"])


def run_mc_map(cfg, seed=0):
    """Micromotion RMS map over (delta_rel, theta) with the manifest filled in."""
    ctx = _context(cfg)
    m = cfg["mc"]
    settings = cfgmod.settings_from_config(cfg)
    node = find_node(ctx.basis, ctx.drive, ctx.guess)
    cache = FieldCache(ctx.basis, node, settings.cache_radius, settings.cache_order)
    hw_d, hw_t = m["delta_rel_halfwidth"], math.radians(m["theta_halfwidth_deg"])
    res = mc_map(ctx.basis, ctx.drive, ctx.species, (-hw_d, hw_d), (-hw_t, hw_t), tuple(m["grid"]), int(m["n_samples"]),
                 seed, settings=settings, node=node, cache=cache, jitter=m["jitter"], temperature=m["temperature"],
                 n_jobs=int(m["n_jobs"]))
    mf = base_manifest(cfg, seed, "mc-map")
    mf["mc"] = res.manifest
    i, j = np.unravel_index(np.nanargmin(res.rms), res.rms.shape)
    mf["summary"] = {
        "min_rms_m": float(res.rms[i, j]),
        "min_delta_rel": float(res.delta_rel_axis[i]),
        "min_theta_rad": float(res.theta_axis[j]),
        "contour_closed": contour_closed(res, m["contour_step"]),
        "n_failed_cells": int(res.failed.sum()),
    }
    res.manifest = mf
    return res


# --------------------------------------------------------------------------
# charging transient


def micromotion_gain(basis, drive, species, node, direction):
    """Linear micromotion RMS (m) per V/m of static field along ``direction``.

    The field shifts the ion by ``d`` in the pseudopotential; the RF field
    ``J d`` there drives motion of amplitude ``q |J d| / (m W^2)`` per
    component, i.e. RMS ``q |J d| / (sqrt(2) m W^2)``.
    """
    spec = secular_spectrum(basis, drive, species, node=node)
    d = displacement_from_field(np.asarray(direction, dtype=float), species, spec)
    jac = _rf_jacobian(basis, drive, node)
    e_rf = jac @ d  # stacked real/imag field phasor per unit V/m
    return float(species.charge * np.linalg.norm(e_rf) / (math.sqrt(2) * species.mass * drive.omega_rf**2)), spec


def _dynamics_gain(cfg, ctx, node, direction):
    settings = cfgmod.settings_from_config(cfg)
    e_cal = cfg["charging"]["e_max"] or 10.0
    cache = FieldCache(ctx.basis, node, settings.cache_radius, settings.cache_order)
    stray = np.asarray(ctx.drive.stray_field) + e_cal * np.asarray(direction)
    dr = ctx.drive.replace(stray_field=tuple(stray))
    coef = cache.combine(dr)
    r_eq, _ = cache.equilibrium(coef, ctx.species, dr.omega_rf)
    traj = steady_state(ctx.basis, dr, ctx.species, r_eq, cache=cache, settings=settings)
    amp2 = sum(micromotion_velocity(traj, ax)[0] ** 2 for ax in np.eye(3)) / dr.omega_rf**2
    return math.sqrt(amp2 / 2) / e_cal


@dataclass
class ChargingReport:
    rise: fitting.FitResult
    decay: fitting.FitResult
    plateau: fitting.FitResult
    gain: float
    e_sat_fit: float
    e_sat_fit_err: float
    e_decay_fit: float
    tau_charge: float
    tau_discharge: float
    noise_sigma: float

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if k not in ("rise", "decay", "plateau")}


def run_charging(cfg, seed=0):
    """Synthetic micromotion transient through one light-on, light-off cycle.

    Returns ``(ScanResult, ChargingReport)``.  The sampled micromotion RMS
    is ``gain * |E(t)|`` plus Gaussian noise of ``amplitude_sigma_rel``
    times the saturated value; rise and decay are fitted separately.
    """
    ctx = _context(cfg)
    c = cfg["charging"]
    model = cfgmod.charging_from_config(cfg)
    on, off, end = c["t_on"], c["t_off"], c["t_end"]
    if off - on < 3 * model.tau_charge or end - off < 3 * model.tau_discharge:
        raise cfgmod.ConfigError("[charging] on and off phases must each last >= 3 time constants")
    node = find_node(ctx.basis, ctx.drive, ctx.guess)
    gain, _ = micromotion_gain(ctx.basis, ctx.drive, ctx.species, node, model.direction)
    if c["method"] == "dynamics":
        gain = _dynamics_gain(cfg, ctx, node, model.direction)
    power = cfg["beam"]["power"]
    t = np.arange(0.0, end + 0.5 * c["sample_dt"], c["sample_dt"])
    e = charging_magnitude(model, [(on, off)], power, t)
    truth = gain * e
    sigma = cfg["noise"]["amplitude_sigma_rel"] * gain * model.e_sat(power)
    rng = np.random.default_rng(_seed_for(seed, 3))
    y = truth + sigma * rng.normal(size=t.shape)
    sig = sigma if sigma > 0 else None

    m_r = (t >= on) & (t <= off)
    m_d = t >= off
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", fitting.FitWarning)
        rise = fitting.fit_exponential(t[m_r], y[m_r], sig, "rise", t0=on)
        decay = fitting.fit_exponential(t[m_d], y[m_d], sig, "decay", t0=off)
    tau_c = rise["tau"] if rise.converged else model.tau_charge
    m_p = (t > on + 5 * tau_c) & (t <= off)
    if m_p.sum() >= 3:
        plateau = fitting.fit_line(t[m_p], y[m_p], sig)
        u = plateau.uncertainties["slope"]
        plateau.stats["slope_sigmas"] = float(abs(plateau["slope"]) / u) if u > 0 else 0.0
    else:
        plateau = fitting.FitResult("line", {"slope": float("nan"), "intercept": float("nan")},
                                    {"slope": float("nan"), "intercept": float("nan")}, float("nan"), False,
                                    flags=["too-few-points"])
    report = ChargingReport(
        rise, decay, plateau, gain, rise["amplitude"] / gain, rise.uncertainties["amplitude"] / gain,
        decay["amplitude"] / gain, rise["tau"], decay["tau"], float(sigma),
    )
    manifest = base_manifest(cfg, seed, "charging")
    manifest.update({"node_m": node.tolist(), "report": report.as_dict()})
    res = ScanResult(t, y, np.full(t.shape, sigma), "t_s", "micromotion_rms_m", manifest,
                     {"field_V_m": e, "micromotion_true_m": truth})
    return res, report


# --------------------------------------------------------------------------
# network and telegraph


def run_network(cfg, seed=0):
    """Ratio sweep over Cv plus sensitivities at the configured Cv."""
    n = cfg["network"]
    omega = cfg["drive"]["omega_rf"]
    net = cfgmod.network_from_config(cfg)
    base = ratio(net, omega)
    h = n["perturbation"]
    dd_cv, dth_cv = sensitivity(net, omega, "Cv", h)
    per_ohm = {}
    for rid in ("R1", "R2"):
        # one differential ohm added to the wire
        up = ratio(net.with_value(rid, net.branch(rid).value + 1.0), omega)
        per_ohm[rid] = math.degrees(up.theta - base.theta)
    summary = {
        "cv_pF": n["cv_pF"],
        "delta": base.delta,
        "theta_deg": base.theta_deg,
        "cv_perturbation": h,
        "ddelta_rel_per_cv_perturbation": dd_cv,
        "dtheta_rad_per_cv_perturbation": dth_cv,
        "dtheta_deg_per_ohm_R1": per_ohm["R1"],
        "dtheta_deg_per_ohm_R2": per_ohm["R2"],
    }
    manifest = base_manifest(cfg, seed, "network")
    manifest["summary"] = summary
    return summary, manifest


def write_network_sweep(path, cfg):
    n = cfg["network"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        write_sweep(path, [c * 1e-12 for c in n["cv_sweep_pF"]], cfg["drive"]["omega_rf"],
                    c1=n["c1_pF"] * 1e-12, c2=n["c2_pF"] * 1e-12, c12=n["c12_pF"] * 1e-12,
                    r1=n["r1"], r2=n["r2"], c12_at_electrodes=n["c12_at_electrodes"])


def run_telegraph(cfg, seed=0):
    s = cfg["scan"]
    gamma = 1.0 / s["d_lifetime"]
    trace = simulate_telegraph(s["telegraph_rate"], gamma, s["r_bright"], s["r_dark"], s["bin_width"], s["duration"],
                               _seed_for(seed, 4))
    thr = s["threshold"] or poisson_threshold(s["r_bright"] * s["bin_width"], s["r_dark"] * s["bin_width"])
    est = shelving_rate_estimate(detect_states(trace, thr), s["bin_width"], int(s["debounce_bins"]))
    manifest = base_manifest(cfg, seed, "telegraph")
    manifest.update({"threshold_counts": thr, "estimate": est.as_dict(), "injected_rate_per_s": s["telegraph_rate"]})
    return trace, est, manifest

