"""Inner loops of tree growing and group-lasso fitting.

Each kernel has two implementations with identical semantics: a loop version
compiled by numba and a vectorised numpy version.  The public names bind to
the numba version when :mod:`rulehte._accel` reports numba available; both
remain importable under their suffixed names for testing and benchmarking.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# best split of a tree node over a set of candidate covariates
# ---------------------------------------------------------------------------


def _split_point(a, b):
    v = a + (b - a) / 2.0
    if not (a < v <= b):
        v = b
    return v


@njit(cache=True)
def _best_split_nb(X, rows, R, u, cols, min_node):
    m = rows.shape[0]
    T = R.shape[1]
    tot = np.zeros(T)
    for k in range(m):
        for t in range(T):
            tot[t] += R[rows[k], t]
    base = 0.0
    for t in range(T):
        base += u[t] * tot[t] * tot[t] / m
    best_gain = 0.0
    best_j = -1
    best_v = np.nan
    xs = np.empty(m)
    left = np.empty(T)
    for jj in range(cols.shape[0]):
        j = cols[jj]
        for k in range(m):
            xs[k] = X[rows[k], j]
        order = np.argsort(xs, kind="mergesort")
        for t in range(T):
            left[t] = 0.0
        for k in range(m - 1):
            i = rows[order[k]]
            for t in range(T):
                left[t] += R[i, t]
            nl = k + 1
            nr = m - nl
            if nr < min_node:
                break
            if nl < min_node:
                continue
            a = xs[order[k]]
            b = xs[order[k + 1]]
            if not a < b:
                continue
            g = -base
            for t in range(T):
                rt = tot[t] - left[t]
                g += u[t] * (left[t] * left[t] / nl + rt * rt / nr)
            if g > best_gain:
                best_gain = g
                best_j = j
                v = a + (b - a) / 2.0
                if not (a < v <= b):
                    v = b
                best_v = v
    return best_gain, best_j, best_v


def _best_split_np(X, rows, R, u, cols, min_node):
    m = rows.shape[0]
    Rn = R[rows]
    tot = Rn.sum(axis=0)
    base = float(u @ (tot * tot)) / m
    best = (0.0, -1, np.nan)
    if m < 2:
        return best
    nl = np.arange(1, m, dtype=np.float64)
    nr = m - nl
    size_ok = (nl >= min_node) & (nr >= min_node)
    if not size_ok.any():
        return best
    for j in cols:
        xs = X[rows, j]
        order = np.argsort(xs, kind="mergesort")
        xs = xs[order]
        left = np.cumsum(Rn[order], axis=0)[:-1]
        right = tot - left
        gains = (left * left / nl[:, None] + right * right / nr[:, None]) @ u - base
        ok = size_ok & (xs[1:] > xs[:-1])
        if not ok.any():
            continue
        gains = np.where(ok, gains, -np.inf)
        k = int(np.argmax(gains))
        if gains[k] > best[0]:
            best = (float(gains[k]), int(j), _split_point(xs[k], xs[k + 1]))
    return best


def best_split_numba(X, rows, R, u, cols, min_node):
    g, j, v = _best_split_nb(X, rows, R, u, cols, min_node)
    return float(g), int(j), float(v)


best_split_numpy = _best_split_np
best_split = best_split_numba if HAVE_NUMBA else best_split_numpy

# ---------------------------------------------------------------------------
# group lasso: block coordinate descent
#
# Bt[g, i] is row i's (centred, possibly scaled) value of basis function g,
# already masked to the row's own arm; column (g, t) of the design is
# Bt[g] * I(arm == t).  Columns of one group touch disjoint rows, so the
# group's Gram matrix is diagonal with entries gram[g, t].  When those are
# all equal (the standardised design) the group update is a closed-form
# group soft-threshold; otherwise a scalar Newton solve finds the norm of
# the updated block.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _group_prox_nb(c, d, pen, out):
    """argmin_b 0.5 b'Db - c'b + pen ||b|| for diagonal D = diag(d) >= 0."""
    A = c.shape[0]
    cn = 0.0
    for t in range(A):
        cn += c[t] * c[t]
    cn = np.sqrt(cn)
    # the margin absorbs rounding so that lam = lambda_max gives exact zeros
    if cn <= pen * (1.0 + 1e-12):
        for t in range(A):
            out[t] = 0.0
        return
    dmin = np.inf
    dmax = 0.0
    for t in range(A):
        if c[t] != 0.0:
            if d[t] < dmin:
                dmin = d[t]
            if d[t] > dmax:
                dmax = d[t]
    if dmax == dmin:
        s = (cn - pen) / dmax
    else:
        # 1 = sum c_t^2 / (d_t s + pen)^2 has one positive root; g is convex and decreasing
        s = (cn - pen) / dmax
        for _ in range(100):
            g = -1.0
            dg = 0.0
            for t in range(A):
                if c[t] != 0.0:
                    q = d[t] * s + pen
                    g += c[t] * c[t] / (q * q)
                    dg -= 2.0 * c[t] * c[t] * d[t] / (q * q * q)
            step = g / dg
            s -= step
            if abs(step) <= 1e-15 * s:
                break
    for t in range(A):
        out[t] = c[t] * s / (d[t] * s + pen) if c[t] != 0.0 else 0.0


@njit(cache=True)
def _group_grad_nb(Bt, arm, n_arms, r, g):
    z = np.zeros(n_arms)
    for i in range(r.shape[0]):
        z[arm[i]] += Bt[g, i] * r[i]
    return z


@njit(cache=True)
def _sweep_nb(Bt, arm, n_arms, r, theta, gram, pen, idx, only_active):
    n = r.shape[0]
    dmax = 0.0
    delta = np.empty(n_arms)
    new = np.empty(n_arms)
    for gg in range(idx.shape[0]):
        g = idx[gg]
        if only_active:
            nz = False
            for t in range(n_arms):
                if theta[g, t] != 0.0:
                    nz = True
            if not nz:
                continue
        c = _group_grad_nb(Bt, arm, n_arms, r, g)
        for t in range(n_arms):
            c[t] += gram[g, t] * theta[g, t]
        _group_prox_nb(c, gram[g], pen[g], new)
        changed = False
        for t in range(n_arms):
            delta[t] = new[t] - theta[g, t]
            if delta[t] != 0.0:
                changed = True
            ad = abs(delta[t])
            if ad > dmax:
                dmax = ad
            theta[g, t] = new[t]
        if changed:
            for i in range(n):
                r[i] -= Bt[g, i] * delta[arm[i]]
    return dmax


@njit(cache=True)
def _bcd_nb(Bt, arm, n_arms, r, theta, gram, pen, idx, tol, max_iter):
    it = 0
    while it < max_iter:
        dmax = _sweep_nb(Bt, arm, n_arms, r, theta, gram, pen, idx, False)
        it += 1
        if dmax < tol:
            return it, True
        while it < max_iter:
            dmax = _sweep_nb(Bt, arm, n_arms, r, theta, gram, pen, idx, True)
            it += 1
            if dmax < tol:
                break
    return it, False


def group_prox_numpy(c, d, pen):
    cn = np.sqrt(c @ c)
    if cn <= pen * (1.0 + 1e-12):
        return np.zeros_like(c)
    nz = c != 0
    if np.ptp(d[nz]) == 0:
        s = (cn - pen) / d[nz][0]
    else:
        s = (cn - pen) / d[nz].max()
        for _ in range(100):
            q = d[nz] * s + pen
            g = np.sum(c[nz] ** 2 / q ** 2) - 1.0
            dg = -2.0 * np.sum(c[nz] ** 2 * d[nz] / q ** 3)
            step = g / dg
            s -= step
            if abs(step) <= 1e-15 * s:
                break
    out = np.zeros_like(c)
    out[nz] = c[nz] * s / (d[nz] * s + pen)
    return out


def _bcd_np(Bt, arm, n_arms, r, theta, gram, pen, idx, tol, max_iter):
    def sweep(only_active):
        dmax = 0.0
        for g in idx:
            if only_active and not theta[g].any():
                continue
            c = np.bincount(arm, weights=Bt[g] * r, minlength=n_arms) + gram[g] * theta[g]
            new = group_prox_numpy(c, gram[g], pen[g])
            delta = new - theta[g]
            if delta.any():
                np.subtract(r, Bt[g] * delta[arm], out=r)
                dmax = max(dmax, float(np.abs(delta).max()))
            theta[g] = new
        return dmax

    it = 0
    while it < max_iter:
        dmax = sweep(False)
        it += 1
        if dmax < tol:
            return it, True
        while it < max_iter:
            dmax = sweep(True)
            it += 1
            if dmax < tol:
                break
    return it, False


def bcd_numba(Bt, arm, n_arms, r, theta, gram, pen, idx, tol, max_iter):
    it, ok = _bcd_nb(Bt, arm, n_arms, r, theta, gram, pen, idx, tol, max_iter)
    return int(it), bool(ok)


def group_prox_numba(c, d, pen):
    out = np.empty_like(c)
    _group_prox_nb(np.asarray(c, dtype=np.float64), np.asarray(d, dtype=np.float64), float(pen), out)
    return out


bcd_numpy = _bcd_np
bcd = bcd_numba if HAVE_NUMBA else bcd_numpy
group_prox = group_prox_numba if HAVE_NUMBA else group_prox_numpy


@njit(cache=True)
def _gradients_nb(Bt, arm, n_arms, r):
    G, n = Bt.shape
    out = np.zeros((G, n_arms))
    for g in range(G):
        for i in range(n):
            out[g, arm[i]] += Bt[g, i] * r[i]
    return out


def _gradients_np(Bt, arm, n_arms, r):
    out = np.zeros((Bt.shape[0], n_arms))
    for t in range(n_arms):
        mask = arm == t
        if mask.any():
            out[:, t] = Bt[:, mask] @ r[mask]
    return out


gradients_numba = _gradients_nb
gradients_numpy = _gradients_np
gradients = gradients_numba if HAVE_NUMBA else gradients_numpy
