# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled damped kick-drift-kick integrator for the cached polynomial field."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, isfinite, sqrt

cnp.import_array()

DEF MAXM = 256
DEF MAXP = 16


cdef inline void _accel(const double* r, const double[:, :, ::1] coef, const int[:, ::1] expo,
                        int m, int order, const double* center, double inv_radius,
                        double qm, double cs, double sn, bint has_b, bint has_d,
                        double* a, double* umax) noexcept nogil:
    cdef double px[MAXP]
    cdef double py[MAXP]
    cdef double pz[MAXP]
    cdef double ux = (r[0] - center[0]) * inv_radius
    cdef double uy = (r[1] - center[1]) * inv_radius
    cdef double uz = (r[2] - center[2]) * inv_radius
    cdef double u2 = ux * ux + uy * uy + uz * uz
    cdef int k, j
    cdef double mono, fa0 = 0, fa1 = 0, fa2 = 0, fb0 = 0, fb1 = 0, fb2 = 0, fd0 = 0, fd1 = 0, fd2 = 0
    if u2 > umax[0]:
        umax[0] = u2
    px[0] = 1.0
    py[0] = 1.0
    pz[0] = 1.0
    for k in range(1, order + 1):
        px[k] = px[k - 1] * ux
        py[k] = py[k - 1] * uy
        pz[k] = pz[k - 1] * uz
    for j in range(m):
        mono = px[expo[j, 0]] * py[expo[j, 1]] * pz[expo[j, 2]]
        fa0 += coef[0, 0, j] * mono
        fa1 += coef[0, 1, j] * mono
        fa2 += coef[0, 2, j] * mono
        if has_b:
            fb0 += coef[1, 0, j] * mono
            fb1 += coef[1, 1, j] * mono
            fb2 += coef[1, 2, j] * mono
        if has_d:
            fd0 += coef[2, 0, j] * mono
            fd1 += coef[2, 1, j] * mono
            fd2 += coef[2, 2, j] * mono
    a[0] = qm * (fa0 * cs - fb0 * sn + fd0)
    a[1] = qm * (fa1 * cs - fb1 * sn + fd1)
    a[2] = qm * (fa2 * cs - fb2 * sn + fd2)


def integrate_batch(double[:, ::1] r, double[:, ::1] v, double[:, :, ::1] coef, int[:, ::1] expo,
                    double[::1] center, double inv_radius, double qm,
                    double[::1] cos_tab, double[::1] sin_tab, long phase0,
                    double dt, long n_steps, double damping, long stride,
                    double z_min, double r_max,
                    double[:, :, ::1] cyc_r, double[:, :, ::1] cyc_v,
                    double[:, :, ::1] rec, int[::1] status, double[::1] umax):
    """Advance every ion in place; see ``fibertrap._pykernels.integrate_batch``."""
    cdef Py_ssize_t n = r.shape[0]
    cdef int m = coef.shape[2]
    cdef long spc = cos_tab.shape[0]
    cdef int order = 0
    cdef Py_ssize_t i, j, c
    cdef long s, ph, n_cyc = cyc_r.shape[1], n_rec = rec.shape[1]
    cdef double eh = exp(-damping * dt / 2)
    cdef double hdt = dt / 2
    cdef double ri[3]
    cdef double vi[3]
    cdef double a[3]
    cdef double sr[3]
    cdef double sv[3]
    cdef double cen[3]
    cdef double um
    cdef bint has_b = False, has_d = False
    if m > MAXM:
        raise ValueError("too many monomials for the compiled kernel")
    for j in range(m):
        for c in range(3):
            if expo[j, c] > order:
                order = expo[j, c]
            if coef[1, c, j] != 0:
                has_b = True
            if coef[2, c, j] != 0:
                has_d = True
    if order >= MAXP:
        raise ValueError("polynomial order too high for the compiled kernel")
    for c in range(3):
        cen[c] = center[c]
    with nogil:
        for i in range(n):
            if status[i] != 0:
                continue
            um = umax[i]
            for c in range(3):
                ri[c] = r[i, c]
                vi[c] = v[i, c]
                sr[c] = 0
                sv[c] = 0
            ph = phase0 % spc
            _accel(ri, coef, expo, m, order, cen, inv_radius, qm, cos_tab[ph], sin_tab[ph], has_b, has_d, a, &um)
            for s in range(n_steps):
                for c in range(3):
                    vi[c] = vi[c] * eh + hdt * a[c]
                    ri[c] = ri[c] + dt * vi[c]
                ph = (phase0 + s + 1) % spc
                _accel(ri, coef, expo, m, order, cen, inv_radius, qm, cos_tab[ph], sin_tab[ph], has_b, has_d, a, &um)
                for c in range(3):
                    vi[c] = (vi[c] + hdt * a[c]) * eh
                    sr[c] += ri[c]
                    sv[c] += vi[c]
                if (s + 1) % spc == 0:
                    j = (s + 1) // spc - 1
                    if j < n_cyc:
                        for c in range(3):
                            cyc_r[i, j, c] = sr[c] / spc
                            cyc_v[i, j, c] = sv[c] / spc
                    for c in range(3):
                        sr[c] = 0
                        sv[c] = 0
                if stride > 0 and (s + 1) % stride == 0:
                    j = (s + 1) // stride - 1
                    if j < n_rec:
                        for c in range(3):
                            rec[i, j, c] = ri[c]
                            rec[i, j, 3 + c] = vi[c]
                if not (isfinite(ri[0]) and isfinite(ri[1]) and isfinite(ri[2])
                        and isfinite(vi[0]) and isfinite(vi[1]) and isfinite(vi[2])):
                    status[i] = 2
                    break
                if ri[2] <= z_min or sqrt(ri[0] * ri[0] + ri[1] * ri[1] + ri[2] * ri[2]) > r_max:
                    status[i] = 1
                    break
            for c in range(3):
                r[i, c] = ri[c]
                v[i, c] = vi[c]
            umax[i] = um
