"""Weighted nonlinear least squares for the scan profiles and transients.

The solver is MINPACK Levenberg-Marquardt (``scipy.optimize.least_squares``
with ``method="lm"``).  Parameter covariances come from the Jacobian at
the solution, ``(J^T W J)^-1``; without per-point sigmas they are scaled
by the reduced chi-square, as in ``curve_fit``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize


class FitWarning(RuntimeWarning):
    pass


@dataclass
class FitResult:
    model: str
    parameters: dict
    uncertainties: dict
    residual_norm: float
    converged: bool
    dof: int = 0
    chi2_reduced: float = float("nan")
    flags: list = field(default_factory=list)
    covariance: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __getitem__(self, k):
        return self.parameters[k]

    def as_dict(self, prefix=""):
        d = {f"{prefix}model": self.model, f"{prefix}converged": self.converged}
        for k, v in self.parameters.items():
            d[f"{prefix}{k}"] = v
            d[f"{prefix}{k}_err"] = self.uncertainties.get(k, float("nan"))
        d[f"{prefix}residual_norm"] = self.residual_norm
        d[f"{prefix}chi2_reduced"] = self.chi2_reduced
        for k, v in self.stats.items():
            d[f"{prefix}{k}"] = v
        if self.flags:
            d[f"{prefix}flags"] = ";".join(self.flags)
        return d


def _unpack(x, y, sigma):
    if y is None:
        pts = np.asarray(x, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ValueError("points must be (x, y) or (x, y, sigma) rows")
        x, y = pts[:, 0], pts[:, 1]
        if pts.shape[1] == 3:
            sigma = pts[:, 2]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if sigma is not None:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
        if np.any(~(sigma > 0)):
            raise ValueError("sigma must be positive")
    return x, y, sigma


def _solve(model, names, fun, p0, x, y, sigma, fixed=None, max_nfev=2000):
    """Generic weighted LM fit; ``fixed`` maps names to held values."""
    fixed = fixed or {}
    free = [n for n in names if n not in fixed]
    w = 1.0 / sigma if sigma is not None else np.ones_like(y)

    def full(q):
        d = dict(zip(free, q))
        d.update(fixed)
        return [d[n] for n in names]

    def resid(q):
        return (fun(x, *full(q)) - y) * w

    q0 = np.array([p0[n] for n in free], dtype=float)
    flags = []
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            sol = optimize.least_squares(resid, q0, method="lm", x_scale="jac", max_nfev=max_nfev)
        q, jac, res, ok = sol.x, sol.jac, sol.fun, sol.status > 0
        if not ok:
            flags.append("no-convergence")
    except (ValueError, np.linalg.LinAlgError) as exc:
        q, jac, res, ok = q0, None, resid(q0), False
        flags.append(f"solver-error:{exc}")
    dof = len(y) - len(free)
    chi2 = float(res @ res)
    chi2r = chi2 / dof if dof > 0 else float("nan")
    params = dict(zip(names, map(float, full(q))))
    unc = {n: 0.0 for n in fixed}
    cov = None
    if ok and jac is not None and np.all(np.isfinite(jac)):
        try:
            # column-normalized normal matrix: conditioning independent of parameter units
            d = np.linalg.norm(jac, axis=0)
            if np.any(d == 0):
                raise np.linalg.LinAlgError("parameter has no effect on the residuals")
            js = jac / d
            jtj = js.T @ js
            if np.linalg.cond(jtj) > 1e14:
                raise np.linalg.LinAlgError("singular normal matrix")
            cov = np.linalg.inv(jtj) / np.outer(d, d)
            if sigma is None and dof > 0:
                cov = cov * chi2r
            for n, v in zip(free, np.sqrt(np.clip(np.diag(cov), 0, None))):
                unc[n] = float(v)
        except np.linalg.LinAlgError:
            ok = False
            flags.append("singular-jacobian")
    if not np.all(np.isfinite(q)):
        ok = False
        flags.append("non-finite")
    if not ok:
        for n in free:
            unc.setdefault(n, float("nan"))
    return FitResult(model, params, unc, math.sqrt(chi2), bool(ok), dof, chi2r, flags, cov)


# --------------------------------------------------------------------------
# models


def gaussian(x, center, waist, amplitude, offset):
    return amplitude * np.exp(-2 * (x - center) ** 2 / waist**2) + offset


def rise(t, amplitude, tau, offset, t0=0.0):
    return amplitude * (1 - np.exp(-(t - t0) / tau)) + offset


def decay(t, amplitude, tau, offset, t0=0.0):
    return amplitude * np.exp(-(t - t0) / tau) + offset


def gaussian_moments(x, y):
    """Moment-based start: offset = min, center/waist from the first two moments."""
    b = float(np.min(y))
    wgt = np.clip(y - b, 0, None)
    if wgt.sum() == 0:
        return None
    c = float(np.sum(wgt * x) / wgt.sum())
    var = float(np.sum(wgt * (x - c) ** 2) / wgt.sum())
    return {"center": c, "waist": 2 * math.sqrt(max(var, 1e-300)), "amplitude": float(np.max(y) - b), "offset": b}


def fit_gaussian(x, y=None, sigma=None, *, waist=None, p0=None):
    """Fit ``A exp(-2 (x - c)^2 / w^2) + b``.

    Accepts ``x, y[, sigma]`` arrays or a single array of ``(x, y[, sigma])``
    rows.  Passing ``waist`` holds the width fixed at that value.
    """
    x, y, sigma = _unpack(x, y, sigma)
    names = ["center", "waist", "amplitude", "offset"]
    if len(x) < 5:
        raise ValueError("need at least 5 points")
    start = gaussian_moments(x, y)
    if start is None or np.ptp(y) == 0:
        nan = float("nan")
        return FitResult("gaussian", {n: nan for n in names}, {n: nan for n in names}, nan, False, flags=["degenerate", "waist-unbounded"])
    if p0:
        start.update(p0)
    fixed = {"waist": float(waist)} if waist is not None else None
    res = _solve("gaussian", names, gaussian, start, x, y, sigma, fixed)
    res.parameters["waist"] = abs(res.parameters["waist"])
    span = np.ptp(x)
    if res.converged and res.parameters["waist"] > 10 * span:
        res.converged = False
        res.flags.append("waist-unbounded")
    return res


def _exp_start(t, y, mode, t0):
    n_tail = max(2, len(t) // 10)
    order = np.argsort(t)
    t, y = t[order], y[order]
    if mode == "rise":
        b = float(np.mean(y[:2]))
        plateau = float(np.mean(y[-n_tail:]))
        a = plateau - b
        g = (plateau - y) / a if a != 0 else np.zeros_like(y)
    else:
        b = float(np.mean(y[-n_tail:]))
        a = float(np.mean(y[:2])) - b
        g = (y - b) / a if a != 0 else np.zeros_like(y)
    # leading run well above the noise: plateau points with g near zero
    # would flatten the log-linear slope
    m = np.cumprod(g > 0.2).astype(bool)
    tau = np.ptp(t) / 3 if np.ptp(t) > 0 else 1.0
    if m.sum() >= 2:
        slope = np.polyfit(t[m] - t0, np.log(g[m]), 1)[0]
        if slope < 0:
            tau = -1.0 / slope
    return {"amplitude": a, "tau": float(tau), "offset": b}


def fit_exponential(t, y=None, sigma=None, mode="rise", t0=0.0, *, p0=None):
    """Fit ``A (1 - exp(-(t - t0)/tau)) + b`` (rise) or ``A exp(-(t - t0)/tau) + b``."""
    if mode not in ("rise", "decay"):
        raise ValueError("mode must be 'rise' or 'decay'")
    t, y, sigma = _unpack(t, y, sigma)
    names = ["amplitude", "tau", "offset"]
    if len(t) < 4:
        raise ValueError("need at least 4 points")
    if np.ptp(y) == 0:
        nan = float("nan")
        return FitResult(mode, {n: nan for n in names}, {n: nan for n in names}, nan, False, flags=["degenerate-amplitude"])
    start = _exp_start(t, y, mode, t0)
    if p0:
        start.update(p0)
    fun = rise if mode == "rise" else decay
    res = _solve(mode, names, lambda tt, a, tau, b: fun(tt, a, tau, b, t0), start, t, y, sigma)
    res.model = "exponential-" + mode
    if res.converged and not res.parameters["tau"] > 0:
        res.converged = False
        res.flags.append("nonphysical-tau")
    if res.converged and np.ptp(t) < res.parameters["tau"]:
        res.flags.append("short-span")
        warnings.warn("data span shorter than one time constant", FitWarning, stacklevel=2)
    if res.converged and res.uncertainties["amplitude"] > abs(res.parameters["amplitude"]):
        res.flags.append("degenerate-amplitude")
    return res


def fit_line(x, y=None, sigma=None, *, through_origin=False):
    """Weighted straight line ``slope * x + intercept`` with R^2."""
    x, y, sigma = _unpack(x, y, sigma)
    if len(x) < 2 + (0 if through_origin else 1):
        raise ValueError("too few points for a line fit")
    w = 1 / sigma**2 if sigma is not None else np.ones_like(y)
    a = x[:, None] if through_origin else np.column_stack([x, np.ones_like(x)])
    aw = a * np.sqrt(w)[:, None]
    yw = y * np.sqrt(w)
    coef, *_ = np.linalg.lstsq(aw, yw, rcond=None)
    res = yw - aw @ coef
    dof = len(x) - a.shape[1]
    chi2 = float(res @ res)
    cov = np.linalg.inv(aw.T @ aw)
    if sigma is None and dof > 0:
        cov = cov * chi2 / dof
    err = np.sqrt(np.diag(cov))
    yhat = a @ coef
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = np.sum(w * (y - ybar) ** 2)
    r2 = 1 - np.sum(w * (y - yhat) ** 2) / ss_tot if ss_tot > 0 else float("nan")
    params = {"slope": float(coef[0]), "intercept": 0.0 if through_origin else float(coef[1])}
    unc = {"slope": float(err[0]), "intercept": 0.0 if through_origin else float(err[1])}
    chi2r = chi2 / dof if dof > 0 else float("nan")
    return FitResult("line", params, unc, math.sqrt(chi2), True, dof, chi2r, [], cov, {"r_squared": float(r2)})
