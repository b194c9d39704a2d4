# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rollout and adjoint kernels.

Same contract as ``_kernels_py``; loops run without the GIL.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, pow, log

DENSITY_CLAMP = 1
SPEED_FLOOR = 2

cnp.import_array()


def forward(const double[::1] rho0, const double[::1] v0, const double[::1] lanes,
            const double[:, ::1] params, const double[:, ::1] r, const double[:, ::1] beta,
            const double[::1] up_q, const double[::1] up_v, const double[::1] down_rho,
            double down_lanes, double L, double delta, double v_min):
    cdef Py_ssize_t T = r.shape[0], N = r.shape[1], t, x
    rho_a = np.empty((T, N))
    v_a = np.empty((T, N))
    flags_a = np.zeros((T, N), dtype=np.int8)
    cdef double[:, ::1] rho = rho_a
    cdef double[:, ::1] v = v_a
    cdef signed char[:, ::1] flags = flags_a
    cdef double c = delta / L
    cdef double rt, vt, q_up, rn, d, dd, vu, ve, vn, tau
    for x in range(N):
        rho[0, x] = rho0[x]
        v[0, x] = v0[x]
    with nogil:
        for t in range(T - 1):
            for x in range(N):
                rt = rho[t, x]
                vt = v[t, x]
                if x == 0:
                    q_up = up_q[t]
                    vu = up_v[t]
                else:
                    q_up = rho[t, x - 1] * v[t, x - 1]
                    vu = v[t, x - 1]
                rn = rt + c * (q_up - rt * vt / (1.0 - beta[t, x]) + r[t, x])
                if rn < 0.0:
                    rn = 0.0
                    flags[t + 1, x] |= 1

                d = rt / lanes[x]
                if x == N - 1:
                    dd = down_rho[t] / down_lanes
                else:
                    dd = rho[t, x + 1] / lanes[x + 1]
                tau = params[0, x]
                ve = params[3, x] * exp(-pow(d / params[4, x], params[5, x]) / params[5, x])
                vn = (vt + delta / tau * (ve - vt) + c * vt * (vu - vt)
                      - params[1, x] * delta / (tau * L) * (dd - d) / (d + params[2, x]))
                if vn < v_min:
                    vn = v_min
                    flags[t + 1, x] |= 2
                rho[t + 1, x] = rn
                v[t + 1, x] = vn
    return rho_a, v_a, flags_a


def adjoint(const double[:, ::1] rho, const double[:, ::1] v, const signed char[:, ::1] flags,
            const double[::1] lanes, const double[:, ::1] params, const double[:, ::1] beta,
            const double[::1] up_v, const double[::1] down_rho, double down_lanes,
            double L, double delta, const double[:, ::1] g_rho, const double[:, ::1] g_v):
    cdef Py_ssize_t T = rho.shape[0], N = rho.shape[1], t, x
    gp_a = np.zeros((6, N))
    gr_a = np.zeros((T, N))
    gb_a = np.zeros((T, N))
    cdef double[:, ::1] gp = gp_a
    cdef double[:, ::1] g_r = gr_a
    cdef double[:, ::1] g_b = gb_a
    lam_a = np.empty((2, N))
    new_a = np.empty((2, N))
    cdef double[:, ::1] lam = lam_a
    cdef double[:, ::1] new = new_a
    cdef double c = delta / L
    cdef double ar, av, rt, vt, om, d, dd, vu, s, sa, ve, dve_dd, log_s, denom, ant, k_ant
    cdef double tau, eta, kappa, v_star, rho_star, alpha, dtau
    for x in range(N):
        lam[0, x] = g_rho[T - 1, x]
        lam[1, x] = g_v[T - 1, x]
    with nogil:
        for t in range(T - 2, -1, -1):
            for x in range(N):
                new[0, x] = g_rho[t, x]
                new[1, x] = g_v[t, x]
            for x in range(N):
                ar = 0.0 if (flags[t + 1, x] & 1) else lam[0, x]
                av = 0.0 if (flags[t + 1, x] & 2) else lam[1, x]
                rt = rho[t, x]
                vt = v[t, x]
                om = 1.0 - beta[t, x]

                new[0, x] += ar * (1.0 - c * vt / om)
                new[1, x] -= ar * c * rt / om
                if x > 0:
                    new[0, x - 1] += ar * c * v[t, x - 1]
                    new[1, x - 1] += ar * c * rho[t, x - 1]
                g_r[t, x] = ar * c
                g_b[t, x] = -ar * c * rt * vt / (om * om)

                tau = params[0, x]
                eta = params[1, x]
                kappa = params[2, x]
                v_star = params[3, x]
                rho_star = params[4, x]
                alpha = params[5, x]
                dtau = delta / tau
                k_ant = eta * delta / (tau * L)
                d = rt / lanes[x]
                if x == N - 1:
                    dd = down_rho[t] / down_lanes
                else:
                    dd = rho[t, x + 1] / lanes[x + 1]
                if x == 0:
                    vu = up_v[t]
                else:
                    vu = v[t, x - 1]
                s = d / rho_star
                sa = pow(s, alpha)
                ve = v_star * exp(-sa / alpha)
                if s > 0.0:
                    dve_dd = -ve * sa / d
                    log_s = log(s)
                else:
                    dve_dd = 0.0
                    log_s = 0.0
                denom = d + kappa
                ant = (dd - d) / denom

                new[1, x] += av * (1.0 - dtau + c * (vu - 2.0 * vt))
                if x > 0:
                    new[1, x - 1] += av * c * vt
                new[0, x] += av * (dtau * dve_dd + k_ant * (dd + kappa) / (denom * denom)) / lanes[x]
                if x < N - 1:
                    new[0, x + 1] -= av * k_ant / denom / lanes[x + 1]

                gp[0, x] += av * (-delta / (tau * tau) * (ve - vt) + k_ant / tau * ant)
                gp[1, x] -= av * delta / (tau * L) * ant
                gp[2, x] += av * k_ant * (dd - d) / (denom * denom)
                gp[3, x] += av * dtau * ve / v_star
                gp[4, x] += av * dtau * ve * sa / rho_star
                gp[5, x] += av * dtau * ve * sa * (1.0 - alpha * log_s) / (alpha * alpha)
            for x in range(N):
                lam[0, x] = new[0, x]
                lam[1, x] = new[1, x]
    return gp_a, gr_a, gb_a
