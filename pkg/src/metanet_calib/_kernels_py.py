"""Pure-numpy rollout and adjoint kernels (fallback for the compiled core).

Both kernels take parameters as a (6, N) array ordered
tau, eta, kappa, v_star, rho_star, alpha.  ``flags[t, x]`` records what
happened while computing row ``t``: bit 1 = density clamped at zero,
bit 2 = speed raised to the floor.
"""
import numpy as np

DENSITY_CLAMP = 1
SPEED_FLOOR = 2


def forward(rho0, v0, lanes, params, r, beta, up_q, up_v, down_rho, down_lanes, L, delta, v_min):
    T, N = r.shape
    tau, eta, kappa, v_star, rho_star, alpha = params
    rho = np.empty((T, N))
    v = np.empty((T, N))
    flags = np.zeros((T, N), dtype=np.int8)
    rho[0] = rho0
    v[0] = v0
    c = delta / L
    k_ant = eta * delta / (tau * L)
    q_up = np.empty(N)
    v_up = np.empty(N)
    d_down = np.empty(N)
    for t in range(T - 1):
        rt, vt = rho[t], v[t]
        q = rt * vt
        q_up[0] = up_q[t]
        q_up[1:] = q[:-1]
        rn = rt + c * (q_up - q / (1.0 - beta[t]) + r[t])
        neg = rn < 0.0
        rn[neg] = 0.0

        d = rt / lanes
        d_down[:-1] = d[1:]
        d_down[-1] = down_rho[t] / down_lanes
        v_up[0] = up_v[t]
        v_up[1:] = vt[:-1]
        ve = v_star * np.exp(-((d / rho_star) ** alpha) / alpha)
        vn = (vt + delta / tau * (ve - vt) + c * vt * (v_up - vt)
              - k_ant * (d_down - d) / (d + kappa))
        low = vn < v_min
        vn[low] = v_min

        rho[t + 1] = rn
        v[t + 1] = vn
        flags[t + 1] = np.where(neg, DENSITY_CLAMP, 0) | np.where(low, SPEED_FLOOR, 0)
    return rho, v, flags


def adjoint(rho, v, flags, lanes, params, beta, up_v, down_rho, down_lanes, L, delta, g_rho, g_v):
    """Reverse sweep: gradients of a scalar J given dJ/drho_t and dJ/dv_t for every row.

    Returns (g_params (6, N), g_r (T, N), g_beta (T, N)).  Row T-1 of the
    ramp gradients is zero because it never reaches the returned grid.
    """
    T, N = rho.shape
    tau, eta, kappa, v_star, rho_star, alpha = params
    g_params = np.zeros((6, N))
    g_r = np.zeros((T, N))
    g_beta = np.zeros((T, N))
    c = delta / L
    k_ant = eta * delta / (tau * L)
    lam_r = np.array(g_rho[T - 1], dtype=float)
    lam_v = np.array(g_v[T - 1], dtype=float)
    d_down = np.empty(N)
    v_up = np.empty(N)
    for t in range(T - 2, -1, -1):
        ar = np.where(flags[t + 1] & DENSITY_CLAMP, 0.0, lam_r)
        av = np.where(flags[t + 1] & SPEED_FLOOR, 0.0, lam_v)
        rt, vt = rho[t], v[t]
        q = rt * vt
        om = 1.0 - beta[t]

        new_r = g_rho[t] + ar * (1.0 - c * vt / om)
        new_v = g_v[t] - ar * c * rt / om
        new_r[:-1] += ar[1:] * c * vt[:-1]
        new_v[:-1] += ar[1:] * c * rt[:-1]
        g_r[t] = ar * c
        g_beta[t] = -ar * c * q / (om * om)

        d = rt / lanes
        d_down[:-1] = d[1:]
        d_down[-1] = down_rho[t] / down_lanes
        v_up[0] = up_v[t]
        v_up[1:] = vt[:-1]
        s = d / rho_star
        sa = s ** alpha
        ve = v_star * np.exp(-sa / alpha)
        pos = s > 0.0
        safe_d = np.where(pos, d, 1.0)
        dve_dd = np.where(pos, -ve * sa / safe_d, 0.0)
        log_s = np.log(np.where(pos, s, 1.0))
        denom = d + kappa
        ant = (d_down - d) / denom

        new_v += av * (1.0 - delta / tau + c * (v_up - 2.0 * vt))
        new_v[:-1] += av[1:] * c * vt[1:]
        new_r += av * (delta / tau * dve_dd + k_ant * (d_down + kappa) / (denom * denom)) / lanes
        new_r[1:] -= av[:-1] * k_ant[:-1] / denom[:-1] / lanes[1:]

        g_params[0] += av * (-delta / (tau * tau) * (ve - vt) + k_ant / tau * ant)
        g_params[1] -= av * delta / (tau * L) * ant
        g_params[2] += av * k_ant * (d_down - d) / (denom * denom)
        g_params[3] += av * delta / tau * ve / v_star
        g_params[4] += av * delta / tau * ve * sa / rho_star
        g_params[5] += av * delta / tau * ve * sa * (1.0 - alpha * log_s) / (alpha * alpha)

        lam_r, lam_v = new_r, new_v
    return g_params, g_r, g_beta
