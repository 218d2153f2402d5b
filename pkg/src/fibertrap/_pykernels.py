"""Pure-numpy reference implementation of the trajectory kernel.

Vectorized over ions, looped over time steps.  Numerically identical
algorithm to the compiled kernel, roughly two orders of magnitude slower.
"""
import numpy as np


def _accel(r, coef, expo, center, inv_radius, qm, cs, sn, order):
    u = (r - center) * inv_radius
    pw = np.ones((order + 1,) + u.shape)
    for k in range(1, order + 1):
        pw[k] = pw[k - 1] * u
    mono = pw[expo[:, 0], :, 0] * pw[expo[:, 1], :, 1] * pw[expo[:, 2], :, 2]  # (M, N)
    f = np.einsum("tcm,mn->tnc", coef, mono)
    a = qm * (f[0] * cs - f[1] * sn + f[2])
    return a, np.sum(u * u, axis=1)


def integrate_batch(r, v, coef, expo, center, inv_radius, qm, cos_tab, sin_tab, phase0,
                    dt, n_steps, damping, stride, z_min, r_max, cyc_r, cyc_v, rec, status, umax):
    """Advance ions in place with damped kick-drift-kick steps.

    Parameters
    ----------
    r, v : (N, 3) arrays, updated in place.
    coef : (3, 3, M) coefficients of the in-phase, quadrature and static
        field polynomials; ``expo`` (M, 3) holds the monomial exponents in
        the scaled coordinate ``u = (r - center) * inv_radius``.
    cos_tab, sin_tab : RF phase tables, one entry per step of a cycle;
        step ``s`` of this call sits at table index ``(phase0 + s) % spc``.
    cyc_r, cyc_v : (N, n_cycles, 3) outputs, per-cycle means of r and v.
    rec : (N, n_rec, 6) output, state every ``stride`` steps.
    status : (N,) int; 0 running, 1 lost, 2 non-finite.  Non-zero entries
        are skipped.
    umax : (N,) running maximum of ``|u|^2``.
    """
    spc = len(cos_tab)
    order = int(expo.max()) if expo.size else 0
    eh = np.exp(-damping * dt / 2)
    hdt = dt / 2
    live = np.flatnonzero(status == 0)
    if live.size == 0:
        return
    ri = r[live].copy()
    vi = v[live].copy()
    sr = np.zeros_like(ri)
    sv = np.zeros_like(vi)
    ph = phase0 % spc
    a, u2 = _accel(ri, coef, expo, center, inv_radius, qm, cos_tab[ph], sin_tab[ph], order)
    um = np.maximum(umax[live], u2)
    st = np.zeros(len(live), dtype=status.dtype)
    n_cyc, n_rec = cyc_r.shape[1], rec.shape[1]
    for s in range(n_steps):
        ok = st == 0
        vi[ok] = vi[ok] * eh + hdt * a[ok]
        ri[ok] = ri[ok] + dt * vi[ok]
        ph = (phase0 + s + 1) % spc
        a_new, u2 = _accel(ri, coef, expo, center, inv_radius, qm, cos_tab[ph], sin_tab[ph], order)
        a[ok] = a_new[ok]
        um[ok] = np.maximum(um[ok], u2[ok])
        vi[ok] = (vi[ok] + hdt * a[ok]) * eh
        sr += ri
        sv += vi
        if (s + 1) % spc == 0:
            j = (s + 1) // spc - 1
            if j < n_cyc:
                cyc_r[live[ok], j] = sr[ok] / spc
                cyc_v[live[ok], j] = sv[ok] / spc
            sr[:] = 0
            sv[:] = 0
        if stride > 0 and (s + 1) % stride == 0:
            j = (s + 1) // stride - 1
            if j < n_rec:
                rec[live[ok], j, :3] = ri[ok]
                rec[live[ok], j, 3:] = vi[ok]
        bad = ok & ~(np.all(np.isfinite(ri), axis=1) & np.all(np.isfinite(vi), axis=1))
        st[bad] = 2
        lost = ok & ~bad & ((ri[:, 2] <= z_min) | (np.linalg.norm(ri, axis=1) > r_max))
        st[lost] = 1
        if np.all(st != 0):
            break
    r[live] = ri
    v[live] = vi
    status[live] = st
    umax[live] = um
