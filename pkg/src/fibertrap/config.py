"""TOML run configuration: defaults, validation, hashing and object builders."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .dynamics import IntegratorSettings
from .fields import SR88, DriveConfig
from .geometry import PaperTrapParams, build_paper_trap
from .optics import ChargingModel, GaussianBeam, calibrate_w0
from .photostats import Line
from .rfnetwork import default_paper_network

SECTIONS = ("trap", "drive", "network", "beam", "charging", "line", "scan", "mc", "noise", "solver")
FREE_TABLES = {("drive", "dc_voltages")}


class ConfigError(ValueError):
    pass


def default_config():
    text = resources.files("fibertrap").joinpath("data/default.toml").read_text()
    return tomllib.loads(text)


def _merge(base, user, path=()):
    for k, v in user.items():
        where = ".".join(path + (k,))
        if path + (k,) in FREE_TABLES:
            if not isinstance(v, dict):
                raise ConfigError(f"[{where}] must be a table")
            base[k] = {str(e): float(x) for e, x in v.items()}
            continue
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a table")
            _merge(base[k], v, path + (k,))
            continue
        ref = base[k]
        if isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where!r} must be true/false")
        elif isinstance(ref, (int, float)):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where!r} must be a number")
            v = type(ref)(v) if isinstance(ref, float) or float(v).is_integer() else v
        elif isinstance(ref, str):
            if not isinstance(v, str):
                raise ConfigError(f"{where!r} must be a string")
        elif isinstance(ref, list):
            if not isinstance(v, list):
                raise ConfigError(f"{where!r} must be a list")
        base[k] = v
    return base


def load_config(path=None, overrides=None):
    """Defaults updated by the TOML file at ``path`` and an ``overrides`` dict."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(cfg, user)
    if overrides:
        _merge(cfg, copy.deepcopy(overrides))
    validate(cfg)
    return cfg


def validate(cfg):
    def positive(sec, key):
        if not cfg[sec][key] > 0:
            raise ConfigError(f"[{sec}] {key} must be positive")

    for sec, key in (
        ("trap", "max_cell"), ("drive", "omega_rf"), ("beam", "wavelength"), ("beam", "calibration_waist"),
        ("beam", "calibration_height"), ("charging", "tau_charge"), ("charging", "tau_discharge"),
        ("charging", "power_ref"), ("charging", "sample_dt"), ("line", "linewidth"), ("scan", "duration"), ("scan", "power_duration"),
        ("scan", "bin_width"), ("scan", "d_lifetime"), ("solver", "cache_radius"),
    ):
        positive(sec, key)
    if cfg["trap"]["gap_model"] not in ("split", "ground"):
        raise ConfigError("[trap] gap_model must be 'split' or 'ground'")
    if cfg["scan"]["height_mode"] not in ("node", "fixed"):
        raise ConfigError("[scan] height_mode must be 'node' or 'fixed'")
    if cfg["charging"]["method"] not in ("mathieu", "dynamics"):
        raise ConfigError("[charging] method must be 'mathieu' or 'dynamics'")
    if not cfg["scan"]["r_bright"] > cfg["scan"]["r_dark"] >= 0:
        raise ConfigError("[scan] need r_bright > r_dark >= 0")
    if len(cfg["mc"]["grid"]) != 2 or min(cfg["mc"]["grid"]) < 1:
        raise ConfigError("[mc] grid must be two positive integers")
    if cfg["mc"]["n_samples"] < 1:
        raise ConfigError("[mc] n_samples must be >= 1")
    for key in ("stray_field", "node_guess"):
        if len(cfg["drive"][key]) != 3:
            raise ConfigError(f"[drive] {key} must have 3 components")
    c = cfg["charging"]
    if not c["t_on"] < c["t_off"] < c["t_end"]:
        raise ConfigError("[charging] need t_on < t_off < t_end")
    try:
        settings_from_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from exc


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# builders


def layout_from_config(cfg):
    t = cfg["trap"]
    p = PaperTrapParams(
        ground_diameter=t["ground_diameter"], rf_major=t["rf_major"], rf_minor=t["rf_minor"],
        rf_offset_y=t["rf_offset_y"], gap=t["gap"], via_diameter=t["via_diameter"],
        via_offset_y=t["via_offset_y"], dc_pad_size=tuple(t["dc_pad_size"]),
    )
    return build_paper_trap(p)


def drive_from_config(cfg, **kw):
    d = cfg["drive"]
    base = DriveConfig(
        omega_rf=d["omega_rf"], v1=d["v1"], delta=d["delta"], theta=math.radians(d["theta_deg"]),
        dc_voltages=dict(d["dc_voltages"]), stray_field=tuple(d["stray_field"]),
    )
    return base.replace(**kw) if kw else base


def network_from_config(cfg, cv=None):
    n = cfg["network"]
    return default_paper_network(
        (n["cv_pF"] if cv is None else cv) * 1e-12, n["c1_pF"] * 1e-12, n["c2_pF"] * 1e-12, n["c12_pF"] * 1e-12,
        n["r1"], n["r2"], n["c12_at_electrodes"],
    )


def settings_from_config(cfg):
    s = cfg["solver"]
    return IntegratorSettings(
        steps_per_cycle=int(s["steps_per_cycle"]), settle_damping=s["settle_damping"],
        measure_damping=s["measure_damping"], measure_cycles=int(s["measure_cycles"]),
        check_cycles=int(s["check_cycles"]), rel_tol=s["rel_tol"], floor_amplitude=s["floor_amplitude"],
        max_settle_cycles=int(s["max_settle_cycles"]), record_stride=int(s["record_stride"]),
        cache_radius=s["cache_radius"], cache_order=int(s["cache_order"]), cache_tol=s["cache_tol"],
    )


def beam_from_config(cfg, origin=(0.0, 0.0, 0.0), power=None):
    b = cfg["beam"]
    w0 = calibrate_w0(b["calibration_waist"], b["calibration_height"], b["wavelength"])
    return GaussianBeam(w0, b["wavelength"], tuple(origin), (0.0, 0.0, 1.0), b["power"] if power is None else power)


def charging_from_config(cfg):
    c = cfg["charging"]
    return ChargingModel(c["e_max"], tuple(c["direction"]), c["tau_charge"], c["tau_discharge"], c["power_ref"])


def lines_from_config(cfg):
    ln = cfg["line"]
    k = 2 * math.pi / ln["wavelength"]
    out = []
    for d in ln["directions"]:
        if len(d) != 3:
            raise ConfigError("[line] directions must be 3-vectors")
        n = math.sqrt(sum(x * x for x in d))
        out.append(Line(ln["linewidth"], ln["detuning"], tuple(k * x / n for x in d)))
    return out


def species_from_config(cfg):
    return SR88
