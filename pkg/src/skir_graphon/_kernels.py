"""Compiled inner loops for the forward and backward time-marching.

Coefficients are passed packed as a ``(K, 7)`` array with columns
beta_s, beta_k, beta_i, mu_k, mu_i, gamma, c.
"""

import numpy as np
from numba import njit

BS, BK, BI, MK, MI, GM, TC = range(7)
EULER, RK4 = 0, 1


@njit(cache=True)
def phi_kernel(u, z_k, z_i, lam_i, coef, a_max, out):
    for b in range(u.shape[0]):
        us, uk, ui = u[b, 0], u[b, 1], u[b, 2]
        out[b, 0] = 1.0 + coef[b, BS] * z_k[b] * (us - uk) + coef[b, BS] * z_i[b] * (us - ui)
        out[b, 1] = 1.0 + coef[b, BK] * z_i[b] * (uk - ui)
        out[b, 2] = 0.5 * (lam_i + 1.0 + coef[b, BI] * z_k[b] * (ui - uk))
        out[b, 3] = 1.0
        for e in range(4):
            if out[b, e] < 0.0:
                out[b, e] = 0.0
            elif out[b, e] > a_max:
                out[b, e] = a_max


@njit(cache=True)
def hjb_kernel(u, z_k, z_i, lam_i, lam_k, coef, a_max, phi, du):
    phi_kernel(u, z_k, z_i, lam_i, coef, a_max, phi)
    for b in range(u.shape[0]):
        us, uk, ui, ur = u[b, 0], u[b, 1], u[b, 2], u[b, 3]
        fs, fk, fi = phi[b, 0], phi[b, 1], phi[b, 2]
        du[b, 0] = (coef[b, BS] * fs * z_k[b] * (us - uk)
                    + coef[b, BS] * fs * z_i[b] * (us - ui)
                    - 0.5 * (1.0 - fs) ** 2)
        du[b, 1] = (coef[b, BK] * fk * z_i[b] * (uk - ui)
                    + coef[b, MK] * (uk - ur) + lam_k
                    - 0.5 * (1.0 - fk) ** 2)
        du[b, 2] = (coef[b, BI] * fi * z_k[b] * (ui - uk)
                    + coef[b, MI] * (ui - ur)
                    - 0.5 * (1.0 - fi) ** 2
                    - 0.5 * (lam_i - fi) ** 2)
        du[b, 3] = coef[b, GM] * (ur - us)


@njit(cache=True)
def kfp_kernel(p, phi, z_k, z_i, coef, dp):
    for b in range(p.shape[0]):
        a_s = coef[b, BS] * phi[b, 0] * p[b, 0]
        s_k = a_s * z_k[b]
        s_i = a_s * z_i[b]
        k_i = coef[b, BK] * phi[b, 1] * z_i[b] * p[b, 1]
        k_r = coef[b, MK] * p[b, 1]
        i_k = coef[b, BI] * phi[b, 2] * z_k[b] * p[b, 2]
        i_r = coef[b, MI] * p[b, 2]
        r_s = coef[b, GM] * p[b, 3]
        dp[b, 0] = r_s - s_k - s_i
        dp[b, 1] = s_k - k_i - k_r + i_k
        dp[b, 2] = s_i + k_i - i_k - i_r
        dp[b, 3] = k_r + i_r - r_s


@njit(cache=True)
def aggregate_kernel(wm, phi, p, z_k, z_i):
    nb = wm.shape[0]
    for k in range(nb):
        sk = 0.0
        si = 0.0
        for l in range(nb):
            sk += wm[k, l] * phi[l, 1] * p[l, 1]
            si += wm[k, l] * phi[l, 2] * p[l, 2]
        z_k[k] = sk
        z_i[k] = si


@njit(cache=True)
def _all_finite(y):
    for v in y.ravel():
        if not np.isfinite(v):
            return False
    return True


@njit(cache=True, nogil=True)
def march_hjb(u_T, z_k, z_i, lam_i, lam_k, coef, a_max, dt, method):
    """Backward march; returns the value field and the first failing step (-1 if none)."""
    n = lam_i.shape[0]
    nb = u_T.shape[0]
    u = np.empty((n + 1, nb, 4))
    u[n] = u_T
    y = u_T.copy()
    phi = np.empty((nb, 4))
    k1 = np.empty((nb, 4))
    k2 = np.empty((nb, 4))
    k3 = np.empty((nb, 4))
    k4 = np.empty((nb, 4))
    zk_mid = np.empty(nb)
    zi_mid = np.empty(nb)
    for k in range(n - 1, -1, -1):
        if method == EULER:
            hjb_kernel(y, z_k[k + 1], z_i[k + 1], lam_i[k], lam_k[k], coef, a_max, phi, k1)
            y = y - dt * k1
        else:
            for b in range(nb):
                zk_mid[b] = 0.5 * (z_k[k, b] + z_k[k + 1, b])
                zi_mid[b] = 0.5 * (z_i[k, b] + z_i[k + 1, b])
            hjb_kernel(y, z_k[k + 1], z_i[k + 1], lam_i[k], lam_k[k], coef, a_max, phi, k1)
            hjb_kernel(y - 0.5 * dt * k1, zk_mid, zi_mid, lam_i[k], lam_k[k], coef, a_max, phi, k2)
            hjb_kernel(y - 0.5 * dt * k2, zk_mid, zi_mid, lam_i[k], lam_k[k], coef, a_max, phi, k3)
            hjb_kernel(y - dt * k3, z_k[k], z_i[k], lam_i[k], lam_k[k], coef, a_max, phi, k4)
            y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not _all_finite(y):
            return u, k
        u[k] = y
    return u, -1


@njit(cache=True)
def _renormalize(y, trigger):
    """Clip-and-renormalize rows in place; returns the largest correction."""
    worst = 0.0
    for b in range(y.shape[0]):
        s = 0.0
        neg = False
        for e in range(4):
            s += y[b, e]
            if y[b, e] < 0.0:
                neg = True
        if abs(s - 1.0) <= trigger and not neg:
            continue
        s = 0.0
        for e in range(4):
            s += max(y[b, e], 0.0)
        for e in range(4):
            fixed = max(y[b, e], 0.0) / s
            worst = max(worst, abs(fixed - y[b, e]))
            y[b, e] = fixed
    return worst


@njit(cache=True, nogil=True)
def march_kfp(p0, phi, z_k, z_i, coef, dt, method, trigger):
    """Forward march; returns (p field, largest renormalization, failing step or -1)."""
    n = phi.shape[0] - 1
    nb = p0.shape[0]
    p = np.empty((n + 1, nb, 4))
    p[0] = p0
    y = p0.copy()
    k1 = np.empty((nb, 4))
    k2 = np.empty((nb, 4))
    k3 = np.empty((nb, 4))
    k4 = np.empty((nb, 4))
    ph_mid = np.empty((nb, 4))
    zk_mid = np.empty(nb)
    zi_mid = np.empty(nb)
    worst = 0.0
    for k in range(n):
        if method == EULER:
            kfp_kernel(y, phi[k], z_k[k], z_i[k], coef, k1)
            y = y + dt * k1
        else:
            for b in range(nb):
                zk_mid[b] = 0.5 * (z_k[k, b] + z_k[k + 1, b])
                zi_mid[b] = 0.5 * (z_i[k, b] + z_i[k + 1, b])
                for e in range(4):
                    ph_mid[b, e] = 0.5 * (phi[k, b, e] + phi[k + 1, b, e])
            kfp_kernel(y, phi[k], z_k[k], z_i[k], coef, k1)
            kfp_kernel(y + 0.5 * dt * k1, ph_mid, zk_mid, zi_mid, coef, k2)
            kfp_kernel(y + 0.5 * dt * k2, ph_mid, zk_mid, zi_mid, coef, k3)
            kfp_kernel(y + dt * k3, phi[k + 1], z_k[k + 1], z_i[k + 1], coef, k4)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not _all_finite(y):
            return p, worst, k
        worst = max(worst, _renormalize(y, trigger))
        p[k + 1] = y
    return p, worst, -1


@njit(cache=True, nogil=True)
def march_uncontrolled(p0, wm, coef, dt, n, method, trigger):
    """Closed forward flow at the natural rate, aggregates taken from each stage."""
    nb = p0.shape[0]
    p = np.empty((n + 1, nb, 4))
    p[0] = p0
    y = p0.copy()
    ones = np.ones((nb, 4))
    z_k = np.empty(nb)
    z_i = np.empty(nb)
    k1 = np.empty((nb, 4))
    k2 = np.empty((nb, 4))
    k3 = np.empty((nb, 4))
    k4 = np.empty((nb, 4))
    for k in range(n):
        aggregate_kernel(wm, ones, y, z_k, z_i)
        kfp_kernel(y, ones, z_k, z_i, coef, k1)
        if method == EULER:
            y = y + dt * k1
        else:
            s = y + 0.5 * dt * k1
            aggregate_kernel(wm, ones, s, z_k, z_i)
            kfp_kernel(s, ones, z_k, z_i, coef, k2)
            s = y + 0.5 * dt * k2
            aggregate_kernel(wm, ones, s, z_k, z_i)
            kfp_kernel(s, ones, z_k, z_i, coef, k3)
            s = y + dt * k3
            aggregate_kernel(wm, ones, s, z_k, z_i)
            kfp_kernel(s, ones, z_k, z_i, coef, k4)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not _all_finite(y):
            return p, k
        _renormalize(y, trigger)
        p[k + 1] = y
    return p, -1
