"""Hot loops with a numba implementation and a vectorised numpy fallback.

Two kernels dominate run time:

* ``agent_run``: fixed-step integration of the projected consensus dynamics
  of every optimisation agent in one subnetwork.
* ``swing_run``: RK4 substeps of the coupled swing / governor / reheat-turbine
  equations of the transmission network.

Both numba and numpy versions compute the same arithmetic in the same order
up to floating-point reassociation; ``USE_NUMBA`` picks the default.
"""

from __future__ import annotations

import numpy as np

from ._jit import USE_NUMBA, njit

DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# Projected consensus dynamics
#
# Per agent j (all arrays indexed [j, k] with k over the 4N decision entries):
#   w' = kappa * (-w + x - grad f_j(x) - W_j^T y_j - sum_q c_jq (x_j - x_q) - z_j)
#   y' = zeta * W_j x_j
#   z' = eta * sum_q c_jq (x_j - x_q)
#   x  = clip(w, lo_j, hi_j)
# grad f_j(x) = hd * (x - x0) is diagonal.  That term is integrated implicitly
# (it is the stiff one), everything else explicitly; y and z then use the new x.
# ---------------------------------------------------------------------------


def _implicit_clip_numpy(b, a, lo, hi):
    # solve  w + a * clip(w, lo, hi) = b  (monotone in w)
    w = b / (1.0 + a)
    w = np.where(w < lo, b - a * lo, w)
    w = np.where(w > hi, b - a * hi, w)
    return w


def agent_run_numpy(w, y, z, lo, hi, hd, x0, Wj, C, kappa, zeta, eta, dt, n_steps):
    """Advance all agents ``n_steps`` steps in place.  Returns steps taken.

    A return value below ``n_steps`` means divergence was detected.
    """
    deg = C.sum(axis=1)[:, None]
    a = dt * kappa * hd
    for step in range(n_steps):
        x = np.minimum(np.maximum(w, lo), hi)
        lx = deg * x - C @ x
        wty = np.einsum("jrk,jr->jk", Wj, y)
        b = w + dt * kappa * (-w + x - wty - lx - z + hd * x0)
        w[:] = _implicit_clip_numpy(b, a, lo, hi)
        x = np.minimum(np.maximum(w, lo), hi)
        lx = deg * x - C @ x
        y += dt * zeta * np.einsum("jrk,jk->jr", Wj, x)
        z += dt * eta * lx
        if not np.all(np.abs(w) < DIVERGENCE_LIMIT):
            return step
    return n_steps


@njit
def agent_run_numba(w, y, z, lo, hi, hd, x0, Wj, C, kappa, zeta, eta, dt, n_steps):
    m, n4 = w.shape
    nr = Wj.shape[1]
    x = np.empty_like(w)
    lx = np.empty_like(w)
    deg = np.zeros(m)
    for j in range(m):
        for q in range(m):
            deg[j] += C[j, q]
    for step in range(n_steps):
        for j in range(m):
            for k in range(n4):
                v = w[j, k]
                if v < lo[j, k]:
                    v = lo[j, k]
                elif v > hi[j, k]:
                    v = hi[j, k]
                x[j, k] = v
        for j in range(m):
            for k in range(n4):
                s = deg[j] * x[j, k]
                for q in range(m):
                    if C[j, q] != 0.0:
                        s -= C[j, q] * x[q, k]
                lx[j, k] = s
        for j in range(m):
            for k in range(n4):
                wty = 0.0
                for r in range(nr):
                    wty += Wj[j, r, k] * y[j, r]
                b = w[j, k] + dt * kappa * (-w[j, k] + x[j, k] - wty - lx[j, k] - z[j, k] + hd[j, k] * x0[j, k])
                a = dt * kappa * hd[j, k]
                v = b / (1.0 + a)
                if v < lo[j, k]:
                    v = b - a * lo[j, k]
                elif v > hi[j, k]:
                    v = b - a * hi[j, k]
                w[j, k] = v
        bad = False
        for j in range(m):
            for k in range(n4):
                v = w[j, k]
                if not (abs(v) < 1e6):
                    bad = True
                if v < lo[j, k]:
                    v = lo[j, k]
                elif v > hi[j, k]:
                    v = hi[j, k]
                x[j, k] = v
        for j in range(m):
            for k in range(n4):
                s = deg[j] * x[j, k]
                for q in range(m):
                    if C[j, q] != 0.0:
                        s -= C[j, q] * x[q, k]
                z[j, k] += dt * eta * s
            for r in range(nr):
                acc = 0.0
                for k in range(n4):
                    acc += Wj[j, r, k] * x[j, k]
                y[j, r] += dt * zeta * acc
        if bad:
            return step
    return n_steps


def agent_run(*args, use_numba: bool | None = None):
    if use_numba is None:
        use_numba = USE_NUMBA
    return (agent_run_numba if use_numba else agent_run_numpy)(*args)


# ---------------------------------------------------------------------------
# Swing + governor + reheat turbine, packed state
#   s = [delta (n), omega (ng), p_v (ng), p_hp (ng), p_rh (ng)]
# ---------------------------------------------------------------------------


def swing_rhs_numpy(s, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp):
    n = b.shape[0]
    ng = gen.shape[0]
    delta = s[:n]
    omega = s[n : n + ng]
    pv = s[n + ng : n + 2 * ng]
    php = s[n + 2 * ng : n + 3 * ng]
    prh = s[n + 3 * ng :]
    flow = (b * np.sin(delta[:, None] - delta[None, :])).sum(axis=1)
    out = np.empty_like(s)
    ddelta = out[:n]
    ddelta[gen] = omega
    ddelta[load] = (u - flow[load] - pd) / Dl
    pm = f_hp * php + (1.0 - f_hp) * prh
    out[n : n + ng] = (-Dg * omega + pm - flow[gen]) / M
    out[n + ng : n + 2 * ng] = (p_ref - droop * omega - pv) / t_g
    out[n + 2 * ng : n + 3 * ng] = (pv - php) / t_ch
    out[n + 3 * ng :] = (php - prh) / t_rh
    return out


def swing_run_numpy(s, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp, h, n_sub):
    args = (b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp)
    s = s.copy()
    for _ in range(n_sub):
        k1 = swing_rhs_numpy(s, *args)
        k2 = swing_rhs_numpy(s + 0.5 * h * k1, *args)
        k3 = swing_rhs_numpy(s + 0.5 * h * k2, *args)
        k4 = swing_rhs_numpy(s + h * k3, *args)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


@njit
def _swing_rhs_numba(s, out, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp):
    n = b.shape[0]
    ng = gen.shape[0]
    flow = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if b[i, j] != 0.0:
                acc += b[i, j] * np.sin(s[i] - s[j])
        flow[i] = acc
    for a in range(ng):
        i = gen[a]
        om = s[n + a]
        pv = s[n + ng + a]
        php = s[n + 2 * ng + a]
        prh = s[n + 3 * ng + a]
        out[i] = om
        pm = f_hp[a] * php + (1.0 - f_hp[a]) * prh
        out[n + a] = (-Dg[a] * om + pm - flow[i]) / M[a]
        out[n + ng + a] = (p_ref[a] - droop[a] * om - pv) / t_g[a]
        out[n + 2 * ng + a] = (pv - php) / t_ch[a]
        out[n + 3 * ng + a] = (php - prh) / t_rh[a]
    for c in range(load.shape[0]):
        i = load[c]
        out[i] = (u[c] - flow[i] - pd[c]) / Dl[c]


@njit
def swing_run_numba(s, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp, h, n_sub):
    m = s.shape[0]
    cur = s.copy()
    tmp = np.empty(m)
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    for _ in range(n_sub):
        _swing_rhs_numba(cur, k1, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp)
        for i in range(m):
            tmp[i] = cur[i] + 0.5 * h * k1[i]
        _swing_rhs_numba(tmp, k2, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp)
        for i in range(m):
            tmp[i] = cur[i] + 0.5 * h * k2[i]
        _swing_rhs_numba(tmp, k3, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp)
        for i in range(m):
            tmp[i] = cur[i] + h * k3[i]
        _swing_rhs_numba(tmp, k4, b, gen, load, M, Dg, Dl, u, pd, p_ref, droop, t_g, t_ch, t_rh, f_hp)
        for i in range(m):
            cur[i] = cur[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return cur


def swing_run(*args, use_numba: bool | None = None):
    if use_numba is None:
        use_numba = USE_NUMBA
    return (swing_run_numba if use_numba else swing_run_numpy)(*args)
