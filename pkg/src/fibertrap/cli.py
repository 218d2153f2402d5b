"""Command-line entry point: ``fibertrap <subcommand> --config FILE --out DIR --seed N``.

Exit status 0 on success, 1 on configuration errors (nothing written),
2 on numerical failures.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import warnings

import numpy as np

from . import experiments as X
from .config import ConfigError, load_config
from .fields import FieldError
from .manifest import write_manifest
from .photostats import NoBrightTime, ThresholdDegenerate, write_estimate
from .rfnetwork import NetworkError

SUBCOMMANDS = ("spectrum", "node-scan", "mode-scan", "power-scan", "mc-map", "charging", "network", "telegraph")
NUMERICAL = (FieldError, NetworkError, NoBrightTime, ThresholdDegenerate, np.linalg.LinAlgError, ArithmeticError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    p = _Parser(prog="fibertrap", description="Fiber-integrated point Paul trap simulations.")
    p.add_argument("command", choices=SUBCOMMANDS, metavar="command", help=" | ".join(SUBCOMMANDS))
    p.add_argument("--config", help="TOML configuration (defaults when omitted)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return p


def _path(out, name):
    return os.path.join(out, name)


# each runner computes first and returns (writer, summary); writer touches disk


def _spectrum(cfg, seed):
    spec, mf = X.run_spectrum(cfg, seed)
    f = spec.secular_frequencies / (2 * math.pi * 1e3)

    def write(out):
        write_manifest(_path(out, "spectrum.txt"), spec.as_dict())
        write_manifest(_path(out, "spectrum_manifest.txt"), mf)

    return write, (f"node height {spec.node_position[2] * 1e6:.1f} um; secular frequencies "
                   f"x {f[0]:.1f} kHz, y' {f[1]:.1f} kHz, z' {f[2]:.1f} kHz; tilt {math.degrees(spec.tilt_angle_yz):.1f} deg")


def _node_scan(cfg, seed):
    res = X.run_node_scan(cfg, seed)

    def write(out):
        res.write_csv(_path(out, "node_scan.csv"))
        write_manifest(_path(out, "node_scan_manifest.txt"), res.metadata)

    z = res.dependent * 1e6
    return write, f"{len(res)} Cv values; node height {np.nanmin(z):.1f}-{np.nanmax(z):.1f} um; failed {res.metadata['n_failed']}"


def _mode_scan(cfg, seed):
    res, rep = X.run_mode_scan(cfg, seed)

    def write(out):
        res.write_csv(_path(out, "mode_scan.csv"))
        X.write_fit(_path(out, "mode_scan_fit.txt"), {"float": rep.fit, "fixed_waist": rep.fit_fixed_waist}, rep.as_dict())
        write_manifest(_path(out, "mode_scan_manifest.txt"), res.metadata)

    f = rep.fit
    return write, (f"center {f['center'] * 1e6:.2f} +- {f.uncertainties['center'] * 1e6:.2f} um; "
                   f"waist {f['waist'] * 1e6:.2f} +- {f.uncertainties['waist'] * 1e6:.2f} um; "
                   f"offset {rep.offset_waists:.3f} +- {rep.offset_waists_err:.3f} waists; "
                   f"final alignment {rep.final_alignment_waists:.3f} waists")


def _power_scan(cfg, seed):
    res, fit = X.run_power_scan(cfg, seed)

    def write(out):
        res.write_csv(_path(out, "power_scan.csv"))
        X.write_fit(_path(out, "power_scan_fit.txt"), {"line": fit})
        write_manifest(_path(out, "power_scan_manifest.txt"), res.metadata)

    return write, (f"slope {fit['slope']:.4g} +- {fit.uncertainties['slope']:.2g} 1/(s W); intercept "
                   f"{fit['intercept']:.3g} +- {fit.uncertainties['intercept']:.2g} 1/s; R^2 {fit.stats['r_squared']:.4f}")


def _mc_map(cfg, seed):
    res = X.run_mc_map(cfg, seed)
    rows = None
    try:
        rows = X.contour_lines(res, cfg["mc"]["contour_step"])
    except ImportError:
        pass

    def write(out):
        res.write_csv(_path(out, "mc_map.csv"))
        write_manifest(_path(out, "mc_map_manifest.txt"), res.manifest)
        if rows is not None:
            X.write_contours(_path(out, "mc_map_contours.csv"), rows)

    s = res.manifest["summary"]
    return write, (f"min RMS {s['min_rms_m'] * 1e9:.2f} nm at (delta_rel {s['min_delta_rel']:.3g}, theta "
                   f"{s['min_theta_rad']:.3g} rad); {cfg['mc']['contour_step'] * 1e9:.0f} nm contour "
                   f"{'closed' if s['contour_closed'] else 'open'}; failed cells {s['n_failed_cells']}")


def _charging(cfg, seed):
    res, rep = X.run_charging(cfg, seed)

    def write(out):
        res.write_csv(_path(out, "charging.csv"))
        X.write_fit(_path(out, "charging_fit.txt"), {"rise": rep.rise, "decay": rep.decay, "plateau": rep.plateau},
                    rep.as_dict())
        write_manifest(_path(out, "charging_manifest.txt"), res.metadata)

    return write, (f"E_sat {rep.e_sat_fit:.3g} +- {rep.e_sat_fit_err:.2g} V/m; tau_charge {rep.tau_charge:.3g} s; "
                   f"tau_discharge {rep.tau_discharge:.3g} s")


def _network(cfg, seed):
    summary, mf = X.run_network(cfg, seed)

    def write(out):
        X.write_network_sweep(_path(out, "network_sweep.csv"), cfg)
        write_manifest(_path(out, "network_sensitivity.txt"), summary)
        write_manifest(_path(out, "network_manifest.txt"), mf)

    return write, (f"delta {summary['delta']:.6f}; theta {summary['theta_deg']:.4f} deg; "
                   f"ddelta/delta {summary['ddelta_rel_per_cv_perturbation']:.3g} per {summary['cv_perturbation']:g} Cv; "
                   f"dtheta {summary['dtheta_deg_per_ohm_R2']:.4f} deg/ohm (V2 path), "
                   f"{summary['dtheta_deg_per_ohm_R1']:.4f} deg/ohm (V1 path)")


def _telegraph(cfg, seed):
    trace, est, mf = X.run_telegraph(cfg, seed)

    def write(out):
        trace.write_csv(_path(out, "telegraph.csv"))
        write_estimate(_path(out, "telegraph_estimate.txt"), est)
        write_manifest(_path(out, "telegraph_manifest.txt"), mf)

    return write, (f"shelving rate {est.rate:.4g} +- {est.stderr:.2g} 1/s from {est.n_transitions} transitions "
                   f"in {est.bright_time:.1f} s bright")


RUNNERS = {
    "spectrum": _spectrum, "node-scan": _node_scan, "mode-scan": _mode_scan, "power-scan": _power_scan,
    "mc-map": _mc_map, "charging": _charging, "network": _network, "telegraph": _telegraph,
}


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            write, summary = RUNNERS[args.command](cfg, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # invalid parameter values surfacing from constructors
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    write(args.out)
    print(f"{args.command}: {summary}")
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":  # pragma: no cover
    main()
