"""Numba kernels for the hot integration path.

All kernels operate on flat float64 arrays and are shared between the
public single-evaluation wrappers (network/controller modules) and the
fused fixed-step integration loop in ``simulate``.  Keeping one set of
kernels guarantees that a scenario run and a sequence of single ``step``
calls produce bit-identical trajectories.

State vector layout used by ``full_rhs``/``rk4_step``/``run_loop``:

    y = [eta (m), f (n), V (n), P_t (n), P_g (n), theta (n), v (mc), lam (n_pd)]

where ``mc`` and ``n_pd`` are zero unless the primal-dual variant is
active (variant code 2).  Variant codes: 0 consensus, 1 consensus with
A = 0 (encoded by a zeroed gain vector), 2 primal-dual.
"""

import numpy as np
from numba import njit

VARIANT_CONSENSUS = 0
VARIANT_A_ZERO = 1
VARIANT_PRIMAL_DUAL = 2


@njit(cache=True)
def network_rhs_kernel(eta, f, V, Pt, Pd, Tp, Kp, TV, XmX, Ef, Ediag, li, lj, lb, deta, df, dV):
    m = eta.shape[0]
    n = f.shape[0]
    for k in range(m):
        deta[k] = f[li[k]] - f[lj[k]]
    for i in range(n):
        df[i] = Pt[i] - Pd[i]
        dV[i] = Ediag[i] * V[i]
    for k in range(m):
        a = li[k]
        b = lj[k]
        g = lb[k] * V[a] * V[b] * np.sin(eta[k])
        df[a] += g
        df[b] -= g
        c = lb[k] * np.cos(eta[k])
        dV[a] += c * V[b]
        dV[b] += c * V[a]
    for i in range(n):
        df[i] = (-f[i] + Kp[i] * df[i]) / Tp[i]
        dV[i] = (Ef[i] - XmX[i] * dV[i]) / TV[i]


@njit(cache=True)
def tg_rhs_kernel(Pt, Pg, f, u, Tt, Tg, Rc, dPt, dPg):
    for i in range(Pt.shape[0]):
        dPt[i] = (-Pt[i] + Pg[i]) / Tt[i]
        dPg[i] = (-f[i] / Rc[i] - Pg[i] + u[i]) / Tg[i]


@njit(cache=True)
def consensus_rhs_kernel(theta, Pt, Tth, Adiag, Lcom, Qc, Rl, dtheta):
    n = theta.shape[0]
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += Lcom[i, j] * (Qc[j] * theta[j] + Rl[j])
        dtheta[i] = (-theta[i] + Pt[i] - Adiag[i] * acc) / Tth[i]


@njit(cache=True)
def primal_dual_rhs_kernel(theta, v, lam, Pt, Pd, Tth, gain, Qc, Rl, ci, cj, dtheta, dv, dlam):
    n = theta.shape[0]
    mc = v.shape[0]
    for i in range(n):
        dtheta[i] = (-theta[i] + Pt[i] - gain[i] * (Qc[i] * theta[i] + Rl[i] - lam[i])) / Tth[i]
        dlam[i] = Pd[i] - theta[i]
    for k in range(mc):
        dv[k] = -(lam[ci[k]] - lam[cj[k]])
        dlam[ci[k]] += v[k]
        dlam[cj[k]] -= v[k]


@njit(cache=True)
def sigma_kernel(f, Pt, Pg, theta, M1, M2, M3, M4, sigma):
    for i in range(f.shape[0]):
        sigma[i] = M1[i] * f[i] + M2[i] * Pt[i] + M3[i] * Pg[i] + M4[i] * theta[i]


@njit(cache=True)
def ssosm_kernel(sigma, xi1max, s_prev, s_prev2, alpha_star, Wmax, eps_peak, dt, alpha, w, u):
    # Three-sample extremum test on (s_prev2, s_prev, sigma), then the
    # suboptimal switching law; sgn(0) = 0 so the controller is quiet
    # exactly on the switching surface.
    for i in range(sigma.shape[0]):
        d1 = s_prev[i] - s_prev2[i]
        d2 = sigma[i] - s_prev[i]
        if d1 * d2 < 0.0 and abs(s_prev[i] - xi1max[i]) > eps_peak:
            xi1max[i] = s_prev[i]
        dev = sigma[i] - 0.5 * xi1max[i]
        if dev * (xi1max[i] - sigma[i]) > 0.0:
            alpha[i] = alpha_star[i]
        else:
            alpha[i] = 1.0
        w[i] = -alpha[i] * Wmax[i] * np.sign(dev)
        u[i] += w[i] * dt
        s_prev2[i] = s_prev[i]
        s_prev[i] = sigma[i]


@njit(cache=True)
def full_rhs(y, u, Pd, variant, params, dy):
    (n, m, mc, Tp, Kp, TV, XmX, Ef, Ediag, li, lj, lb, Tt, Tg, Rc,
     Tth, Adiag, Lcom, Qc, Rl, pd_gain, ci, cj) = params
    eta = y[0:m]
    f = y[m:m + n]
    V = y[m + n:m + 2 * n]
    Pt = y[m + 2 * n:m + 3 * n]
    Pg = y[m + 3 * n:m + 4 * n]
    th = y[m + 4 * n:m + 5 * n]
    deta = dy[0:m]
    df = dy[m:m + n]
    dV = dy[m + n:m + 2 * n]
    dPt = dy[m + 2 * n:m + 3 * n]
    dPg = dy[m + 3 * n:m + 4 * n]
    dth = dy[m + 4 * n:m + 5 * n]
    network_rhs_kernel(eta, f, V, Pt, Pd, Tp, Kp, TV, XmX, Ef, Ediag, li, lj, lb, deta, df, dV)
    tg_rhs_kernel(Pt, Pg, f, u, Tt, Tg, Rc, dPt, dPg)
    if variant == 2:
        v = y[m + 5 * n:m + 5 * n + mc]
        lam = y[m + 5 * n + mc:m + 6 * n + mc]
        dv = dy[m + 5 * n:m + 5 * n + mc]
        dlam = dy[m + 5 * n + mc:m + 6 * n + mc]
        primal_dual_rhs_kernel(th, v, lam, Pt, Pd, Tth, pd_gain, Qc, Rl, ci, cj, dth, dv, dlam)
    else:
        consensus_rhs_kernel(th, Pt, Tth, Adiag, Lcom, Qc, Rl, dth)


@njit(cache=True)
def rk4_step(y, u, Pd, variant, params, dt, k1, k2, k3, k4, ytmp):
    N = y.shape[0]
    full_rhs(y, u, Pd, variant, params, k1)
    h = 0.5 * dt
    for i in range(N):
        ytmp[i] = y[i] + h * k1[i]
    full_rhs(ytmp, u, Pd, variant, params, k2)
    for i in range(N):
        ytmp[i] = y[i] + h * k2[i]
    full_rhs(ytmp, u, Pd, variant, params, k3)
    for i in range(N):
        ytmp[i] = y[i] + dt * k3[i]
    full_rhs(ytmp, u, Pd, variant, params, k4)
    c = dt / 6.0
    for i in range(N):
        y[i] += c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def run_loop(y, u, Pd, xi1max, s_prev, s_prev2, alpha, w,
             variant, params, M1, M2, M3, M4, alpha_star, Wmax, eps_peak,
             ev_step, ev_delta, dt, n_steps, stride,
             out_t, out_y, out_u, out_w, out_sigma, out_sigdot, out_Pd):
    """Fixed-step closed loop: RK4 on the smooth states with zero-order-hold
    u and P_d, one SSOSM update per step from the fresh sigma sample.

    Returns -1 on success, otherwise the record index at which a
    non-finite component was first seen (records past it are unfilled).
    """
    (n, m, mc) = (params[0], params[1], params[2])
    N = y.shape[0]
    k1 = np.empty(N)
    k2 = np.empty(N)
    k3 = np.empty(N)
    k4 = np.empty(N)
    ytmp = np.empty(N)
    sig = np.empty(n)

    ev_ptr = 0
    n_ev = ev_step.shape[0]
    while ev_ptr < n_ev and ev_step[ev_ptr] == 0:
        for i in range(n):
            Pd[i] += ev_delta[ev_ptr, i]
        ev_ptr += 1

    # initial record
    rec = 0
    out_t[0] = 0.0
    for i in range(N):
        out_y[0, i] = y[i]
    full_rhs(y, u, Pd, variant, params, k1)
    for i in range(n):
        out_u[0, i] = u[i]
        out_w[0, i] = w[i]
        f_i = y[m + i]
        out_sigma[0, i] = M1[i] * f_i + M2[i] * y[m + 2 * n + i] + M3[i] * y[m + 3 * n + i] + M4[i] * y[m + 4 * n + i]
        out_sigdot[0, i] = M1[i] * k1[m + i] + M2[i] * k1[m + 2 * n + i] + M3[i] * k1[m + 3 * n + i] + M4[i] * k1[m + 4 * n + i]
        out_Pd[0, i] = Pd[i]

    for k in range(n_steps):
        rk4_step(y, u, Pd, variant, params, dt, k1, k2, k3, k4, ytmp)
        sigma_kernel(y[m:m + n], y[m + 2 * n:m + 3 * n], y[m + 3 * n:m + 4 * n], y[m + 4 * n:m + 5 * n],
                     M1, M2, M3, M4, sig)
        ssosm_kernel(sig, xi1max, s_prev, s_prev2, alpha_star, Wmax, eps_peak, dt, alpha, w, u)
        kk = k + 1
        while ev_ptr < n_ev and ev_step[ev_ptr] == kk:
            for i in range(n):
                Pd[i] += ev_delta[ev_ptr, i]
            ev_ptr += 1
        if kk % stride == 0:
            rec += 1
            ok = True
            for i in range(N):
                if not np.isfinite(y[i]):
                    ok = False
                    break
            if not ok:
                return rec
            out_t[rec] = kk * dt
            for i in range(N):
                out_y[rec, i] = y[i]
            full_rhs(y, u, Pd, variant, params, k1)
            for i in range(n):
                out_u[rec, i] = u[i]
                out_w[rec, i] = w[i]
                out_sigma[rec, i] = sig[i]
                out_sigdot[rec, i] = M1[i] * k1[m + i] + M2[i] * k1[m + 2 * n + i] + M3[i] * k1[m + 3 * n + i] + M4[i] * k1[m + 4 * n + i]
                out_Pd[rec, i] = Pd[i]
    return -1
