"""Exact weighted check-loss fits for one covariate (intercept or line).

The line fit is a vertex-pivoting method for the two-parameter quantile
regression LP.  With one observation held at zero residual, the remaining
objective as a function of the slope is a weighted asymmetric-L1 problem in
the pairwise slopes, solved exactly by a sorted scan.  Each rotation moves
to a better vertex; a vertex is optimal once no line through a zero-residual
observation improves it.  Ties are resolved by walking the optimal face to
its lexicographically smallest (intercept, slope) vertex.
"""

import numpy as np
from numba import njit

REL_TOL = 1e-12
DZ_EPS = 1e-14


@njit(cache=True)
def lower_minimizer(s, a, b):
    """Minimise ``sum a_k (s_k - t)^+ + b_k (t - s_k)^+`` over t.

    Returns ``(t_lo, t_hi, k)``: the minimiser interval and the index of an
    atom sitting at ``t_lo``.  Requires ``a + b > 0`` elementwise.
    """
    m = s.size
    order = np.argsort(s, kind="mergesort")
    a_tot = 0.0
    b_tot = 0.0
    for i in range(m):
        a_tot += a[i]
        b_tot += b[i]
    tol = REL_TOL * (a_tot + b_tot)
    cum_a = 0.0
    cum_b = 0.0
    i = 0
    while i < m:
        v = s[order[i]]
        j = i
        while j < m and s[order[j]] == v:
            cum_a += a[order[j]]
            cum_b += b[order[j]]
            j += 1
        slope_right = cum_b - (a_tot - cum_a)
        if slope_right >= -tol:
            if slope_right <= tol and j < m:
                return v, s[order[j]], order[i]
            return v, v, order[i]
        i = j
    return s[order[m - 1]], s[order[m - 1]], order[m - 1]


@njit(cache=True)
def check_objective(alpha, beta, z, y, w, tau):
    tot = 0.0
    for i in range(z.size):
        r = y[i] - alpha - beta * z[i]
        if r >= 0.0:
            tot += w[i] * tau * r
        else:
            tot -= w[i] * (1.0 - tau) * r
    return tot


@njit(cache=True)
def _rotate(k, z, y, w, tau, s_buf, a_buf, b_buf, idx_buf):
    # best slope for lines through observation k
    m = 0
    for i in range(z.size):
        if i == k:
            continue
        dz = z[i] - z[k]
        if abs(dz) <= DZ_EPS:
            continue
        s_buf[m] = (y[i] - y[k]) / dz
        if dz > 0.0:
            a_buf[m] = w[i] * dz * tau
            b_buf[m] = w[i] * dz * (1.0 - tau)
        else:
            a_buf[m] = -w[i] * dz * (1.0 - tau)
            b_buf[m] = -w[i] * dz * tau
        idx_buf[m] = i
        m += 1
    if m == 0:
        return np.nan, np.nan, -1
    lo, hi, p = lower_minimizer(s_buf[:m], a_buf[:m], b_buf[:m])
    return lo, hi, idx_buf[p]


@njit(cache=True)
def fit_intercept(y, w, tau):
    """Weighted lower tau-quantile; returns (q, objective, non-unique flag)."""
    lo, hi, _ = lower_minimizer(y, w * tau, w * (1.0 - tau))
    return lo, check_objective(lo, 0.0, y, y, w, tau), hi > lo


@njit(cache=True)
def fit_line(z, y, w, tau, beta0, max_iter=10000):
    """Exact minimiser of sum w_i l_tau(y_i - a - b z_i).

    Returns ``(a, b, objective, non-unique flag, iterations)``.  Caller
    guarantees at least two distinct ``z`` among positive weights.
    """
    m = z.size
    s_buf = np.empty(m)
    a_buf = np.empty(m)
    b_buf = np.empty(m)
    idx_buf = np.empty(m, dtype=np.int64)

    wy = 0.0
    ymax = 0.0
    for i in range(m):
        wy += w[i] * abs(y[i])
        if abs(y[i]) > ymax:
            ymax = abs(y[i])
    ztol = 1e-11 * (1.0 + ymax)

    e = y - beta0 * z
    alpha, _, k = lower_minimizer(e, w * tau, w * (1.0 - tau))
    beta = beta0
    obj = check_objective(alpha, beta, z, y, w, tau)
    it = 0
    first = True
    nonunique = False
    while it < max_iter:
        # descent by rotations about the current pivot
        while it < max_iter:
            it += 1
            eps = REL_TOL * obj + 1e-15 * wy
            blo, bhi, knew = _rotate(k, z, y, w, tau, s_buf, a_buf, b_buf, idx_buf)
            if knew < 0:
                break
            a_new = y[k] - blo * z[k]
            o_new = check_objective(a_new, blo, z, y, w, tau)
            if first or o_new < obj - eps:
                alpha = a_new
                beta = blo
                obj = o_new
                k = knew
                first = False
            else:
                break
        # every zero-residual line is an edge of the vertex: check each for
        # descent, otherwise collect the lexicographically smallest optimal
        # endpoint along it
        it += 1
        eps = REL_TOL * obj + 1e-15 * wy
        improved = False
        best_a = alpha
        best_b = beta
        for i in range(m):
            if abs(y[i] - alpha - beta * z[i]) > ztol:
                continue
            blo, bhi, knew = _rotate(i, z, y, w, tau, s_buf, a_buf, b_buf, idx_buf)
            if knew < 0:
                continue
            a_new = y[i] - blo * z[i]
            o_new = check_objective(a_new, blo, z, y, w, tau)
            if o_new < obj - eps:
                alpha = a_new
                beta = blo
                obj = o_new
                k = knew
                improved = True
                break
            if o_new > obj + eps:
                continue
            if bhi > blo:
                nonunique = True
            for c in range(2):
                bc = blo if c == 0 else bhi
                ac = y[i] - bc * z[i]
                atol = 1e-12 * (1.0 + abs(best_a))
                if ac < best_a - atol or (
                    abs(ac - best_a) <= atol and bc < best_b - 1e-12 * (1.0 + abs(best_b))
                ):
                    best_a = ac
                    best_b = bc
        if improved:
            continue
        if best_a == alpha and best_b == beta:
            break
        # move along the optimal face; the new vertex is rechecked above
        alpha = best_a
        beta = best_b
        obj = check_objective(alpha, beta, z, y, w, tau)
        first = False
        k = -1
        for i in range(m):
            if abs(y[i] - alpha - beta * z[i]) <= ztol:
                k = i
                break
    # recompute the vertex from its first two zero-residual rows so the
    # result does not depend on the pivoting path (or a warm start)
    i0 = -1
    for i in range(m):
        if abs(y[i] - alpha - beta * z[i]) > ztol:
            continue
        if i0 < 0:
            i0 = i
        elif abs(z[i] - z[i0]) > DZ_EPS:
            b_c = (y[i] - y[i0]) / (z[i] - z[i0])
            a_c = y[i0] - b_c * z[i0]
            o_c = check_objective(a_c, b_c, z, y, w, tau)
            if o_c <= obj + REL_TOL * obj + 1e-15 * wy:
                alpha = a_c
                beta = b_c
                obj = o_c
            break
    return alpha, beta, obj, nonunique, it


@njit(cache=True)
def surface_1d(X, Y, W, xg, taus, h, radius, peak, unit_weight, mass_floor, order):
    """Local constant (order 0) or local linear (order 1) quantile surface.

    Returns ``(q, slope, objective, nonunique, mass, usable)`` with the first
    four shaped ``(len(xg), len(taus))``.  A point is usable when its kernel
    mass, in units of observations at the evaluation point, reaches
    ``mass_floor`` and the local design has full rank.
    """
    G = xg.size
    T = taus.size
    m = X.size
    q = np.full((G, T), np.nan)
    slope = np.full((G, T), np.nan)
    objv = np.full((G, T), np.nan)
    nonunique = np.zeros((G, T), dtype=np.bool_)
    mass = np.zeros(G)
    usable = np.zeros(G, dtype=np.bool_)
    zb = np.empty(m)
    yb = np.empty(m)
    wb = np.empty(m)
    for g in range(G):
        cnt = 0
        tot = 0.0
        for i in range(m):
            if W[i] <= 0.0:
                continue
            u = (X[i] - xg[g]) / h
            t = u / radius
            if abs(t) > 1.0:
                continue
            kv = peak * (1.0 - t * t)
            if kv <= 0.0:
                continue
            zb[cnt] = u
            yb[cnt] = Y[i]
            wb[cnt] = W[i] * kv
            tot += W[i] * kv
            cnt += 1
        mass[g] = tot / (peak * unit_weight)
        if cnt == 0 or mass[g] < mass_floor:
            continue
        z = zb[:cnt]
        yy = yb[:cnt]
        ww = wb[:cnt]
        if order == 1:
            distinct = False
            for i in range(1, cnt):
                if abs(z[i] - z[0]) > DZ_EPS:
                    distinct = True
                    break
            if not distinct:
                continue
        usable[g] = True
        beta = 0.0
        for j in range(T):
            if order == 0:
                a, o, nu = fit_intercept(yy, ww, taus[j])
                q[g, j] = a
                slope[g, j] = 0.0
                objv[g, j] = o
                nonunique[g, j] = nu
            else:
                a, b, o, nu, _ = fit_line(z, yy, ww, taus[j], beta)
                beta = b
                q[g, j] = a
                slope[g, j] = b
                objv[g, j] = o
                nonunique[g, j] = nu
    return q, slope, objv, nonunique, mass, usable
