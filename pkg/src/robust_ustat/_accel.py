"""Batched spectral passes used by the robust solver.

Given a batch of symmetric residuals R_b, the solver needs

    sum_b psi(R_b)            (gradient direction)
    sum_b tr Psi(R_b)         (objective)

computed per gradient-descent step.  Two implementations:

* a dense pass that eigendecomposes each residual (general kernels), and
* a rank-one pass for kernels with values H = z z^T, where the residual in
  the eigenbasis of -theta*U is a shared diagonal plus a per-item rank-one
  update; its eigensystem comes from the secular equation with shared poles,
  which is an order of magnitude faster than dense eigendecomposition.

Both are compiled with numba when available, with numpy references kept for
verification and fallback.  Accumulation is performed per fixed-size
sub-chunk and combined in sub-chunk order, so results are bitwise identical
for any thread count.

Numerical safety of the rank-one pass rests on psi being 1-Lipschitz as a
matrix function: flooring tiny update weights and enforcing a minimum gap
between poles perturbs the input matrix by O(1e-11) in operator norm, hence
the output by no more, regardless of spectral degeneracy.
"""

from __future__ import annotations

import os

import numpy as np

SUBCHUNK = 256
GAP_REL = 1e-12
WEIGHT_REL = 1e-13

# prefer omp over tbb (old tbb builds trigger an import-time warning)
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


def _psi_np(x):
    return np.where(np.abs(x) <= 1.0, x - np.sign(x) * x * x / 2.0, np.sign(x) * 0.5)


def _Psi_np(x):
    ax = np.abs(x)
    return np.where(ax <= 1.0, x * x / 2.0 - ax**3 / 6.0, 1.0 / 3.0 + 0.5 * (ax - 1.0))


def dense_pass_np(values: np.ndarray, u: np.ndarray, theta: float):
    """Reference dense pass: eigendecompose theta*(H_b - U) for each b."""
    r = theta * (values - u)
    w, v = np.linalg.eigh(r)
    c = _psi_np(w)
    q = v.transpose(0, 2, 1).reshape(-1, u.shape[0])
    g = (q * c.reshape(-1)[:, None]).T @ q
    return (g + g.T) / 2.0, float(_Psi_np(w).sum())


def rank1_pass_np(dvals: np.ndarray, wmat: np.ndarray):
    """Reference rank-one pass: eigendecompose diag(D) + w w^T for each row."""
    b, d = wmat.shape
    mats = np.broadcast_to(np.diag(dvals), (b, d, d)).copy()
    mats += wmat[:, :, None] * wmat[:, None, :]
    w, v = np.linalg.eigh(mats)
    c = _psi_np(w)
    q = v.transpose(0, 2, 1).reshape(-1, d)
    g = (q * c.reshape(-1)[:, None]).T @ q
    return (g + g.T) / 2.0, float(_Psi_np(w).sum())


def masked_pass_np(zmat: np.ndarray, mask: np.ndarray, u: np.ndarray, theta: float):
    """Reference masked pass on H_b = mask * (z_b z_b^T)."""
    values = mask[None, :, :] * (zmat[:, :, None] * zmat[:, None, :])
    return dense_pass_np(values, u, theta)


if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _psi_s(x):
        if x > 1.0:
            return 0.5
        if x < -1.0:
            return -0.5
        if x >= 0.0:
            return x - x * x / 2.0
        return x + x * x / 2.0

    @njit(cache=True, inline="always")
    def _Psi_s(x):
        ax = abs(x)
        if ax <= 1.0:
            return x * x / 2.0 - ax * ax * ax / 6.0
        return 1.0 / 3.0 + 0.5 * (ax - 1.0)

    @njit(cache=True, fastmath=True)
    def _tred2(a, dvec, evec):
        """Householder tridiagonalization with accumulated transform (in place).

        On exit a holds the orthogonal matrix, dvec the diagonal and evec the
        subdiagonal of the tridiagonal form.  Classic EISPACK scheme.
        """
        n = a.shape[0]
        for i in range(n - 1, 0, -1):
            l = i - 1
            h = 0.0
            scale = 0.0
            if l > 0:
                for k in range(l + 1):
                    scale += abs(a[i, k])
                if scale == 0.0:
                    evec[i] = a[i, l]
                else:
                    for k in range(l + 1):
                        a[i, k] /= scale
                        h += a[i, k] * a[i, k]
                    f = a[i, l]
                    g = -np.sqrt(h) if f >= 0.0 else np.sqrt(h)
                    evec[i] = scale * g
                    h -= f * g
                    a[i, l] = f - g
                    f = 0.0
                    for j in range(l + 1):
                        a[j, i] = a[i, j] / h
                        g = 0.0
                        for k in range(j + 1):
                            g += a[j, k] * a[i, k]
                        for k in range(j + 1, l + 1):
                            g += a[k, j] * a[i, k]
                        evec[j] = g / h
                        f += evec[j] * a[i, j]
                    hh = f / (h + h)
                    for j in range(l + 1):
                        f = a[i, j]
                        g = evec[j] - hh * f
                        evec[j] = g
                        for k in range(j + 1):
                            a[j, k] -= f * evec[k] + g * a[i, k]
            else:
                evec[i] = a[i, l]
            dvec[i] = h
        dvec[0] = 0.0
        evec[0] = 0.0
        for i in range(n):
            if dvec[i] != 0.0:
                for j in range(i):
                    g = 0.0
                    for k in range(i):
                        g += a[i, k] * a[k, j]
                    for k in range(i):
                        a[k, j] -= g * a[k, i]
            dvec[i] = a[i, i]
            a[i, i] = 1.0
            for j in range(i):
                a[j, i] = 0.0
                a[i, j] = 0.0

    @njit(cache=True, fastmath=True)
    def _tql2(dvec, evec, zt):
        """Implicit-QL eigensolver for a tridiagonal matrix, rotating zt along.

        dvec/evec come from _tred2 and zt holds the TRANSPOSED accumulated
        transform (rows are basis vectors), so each Givens rotation touches
        two contiguous rows.  On exit dvec holds eigenvalues (unsorted) and
        the ROWS of zt the eigenvectors.  Returns False only if an eigenvalue
        fails to converge in 60 sweeps.
        """
        n = dvec.shape[0]
        eps = 2.220446049250313e-16
        for i in range(1, n):
            evec[i - 1] = evec[i]
        evec[n - 1] = 0.0
        for l in range(n):
            for _ in range(60):
                m = l
                while m < n - 1:
                    dd = abs(dvec[m]) + abs(dvec[m + 1])
                    if abs(evec[m]) <= eps * dd:
                        break
                    m += 1
                if m == l:
                    break
                g = (dvec[l + 1] - dvec[l]) / (2.0 * evec[l])
                r = np.hypot(g, 1.0)
                sign_r = r if g >= 0.0 else -r
                g = dvec[m] - dvec[l] + evec[l] / (g + sign_r)
                s = 1.0
                c = 1.0
                p = 0.0
                underflow = False
                for i in range(m - 1, l - 1, -1):
                    f = s * evec[i]
                    b = c * evec[i]
                    r = np.hypot(f, g)
                    evec[i + 1] = r
                    if r == 0.0:
                        dvec[i + 1] -= p
                        evec[m] = 0.0
                        underflow = True
                        break
                    s = f / r
                    c = g / r
                    g = dvec[i + 1] - p
                    r = (dvec[i] - g) * s + 2.0 * c * b
                    p = s * r
                    dvec[i + 1] = g + p
                    g = c * r - b
                    for k in range(n):
                        f = zt[i + 1, k]
                        zt[i + 1, k] = s * zt[i, k] + c * f
                        zt[i, k] = c * zt[i, k] - s * f
                if underflow:
                    continue
                dvec[l] -= p
                evec[l] = g
                evec[m] = 0.0
            else:
                return False
        return True

    @njit(cache=True, parallel=True, fastmath=True)
    def _dense_pass_nb(values, u, theta, gsub, osub):
        nb_items, d = values.shape[0], values.shape[1]
        nsub = gsub.shape[0]
        for s in prange(nsub):
            lo = s * SUBCHUNK
            hi = min(lo + SUBCHUNK, nb_items)
            gloc = np.zeros((d, d))
            oloc = 0.0
            r = np.empty((d, d))
            zt = np.empty((d, d))
            dvec = np.empty(d)
            evec = np.empty(d)
            for b in range(lo, hi):
                for i in range(d):
                    for j in range(d):
                        r[i, j] = theta * (values[b, i, j] - u[i, j])
                _tred2(r, dvec, evec)
                for i in range(d):
                    for j in range(d):
                        zt[i, j] = r[j, i]
                if not _tql2(dvec, evec, zt):
                    # fall back to LAPACK on the rare non-converged item
                    for i in range(d):
                        for j in range(d):
                            r[i, j] = theta * (values[b, i, j] - u[i, j])
                    dvec, vv = np.linalg.eigh(r)
                    for i in range(d):
                        for j in range(d):
                            zt[i, j] = vv[j, i]
                for k in range(d):
                    c = _psi_s(dvec[k])
                    oloc += _Psi_s(dvec[k])
                    for i in range(d):
                        qi = c * zt[k, i]
                        for j in range(i, d):
                            gloc[i, j] += qi * zt[k, j]
            gsub[s] = gloc
            osub[s] = oloc

    @njit(cache=True, parallel=True, fastmath=True)
    def _masked_pass_nb(zmat, mask, u, theta, gsub, osub):
        """Dense pass for H_b = mask * (z_b z_b^T), built per pair in cache."""
        nb_items, d = zmat.shape
        nsub = gsub.shape[0]
        for s in prange(nsub):
            lo = s * SUBCHUNK
            hi = min(lo + SUBCHUNK, nb_items)
            gloc = np.zeros((d, d))
            oloc = 0.0
            r = np.empty((d, d))
            zt = np.empty((d, d))
            dvec = np.empty(d)
            evec = np.empty(d)
            for b in range(lo, hi):
                for i in range(d):
                    zi = zmat[b, i]
                    for j in range(d):
                        r[i, j] = theta * (mask[i, j] * zi * zmat[b, j] - u[i, j])
                _tred2(r, dvec, evec)
                for i in range(d):
                    for j in range(d):
                        zt[i, j] = r[j, i]
                if not _tql2(dvec, evec, zt):
                    for i in range(d):
                        zi = zmat[b, i]
                        for j in range(d):
                            r[i, j] = theta * (mask[i, j] * zi * zmat[b, j] - u[i, j])
                    dvec, vv = np.linalg.eigh(r)
                    for i in range(d):
                        for j in range(d):
                            zt[i, j] = vv[j, i]
                for k in range(d):
                    c = _psi_s(dvec[k])
                    oloc += _Psi_s(dvec[k])
                    for i in range(d):
                        qi = c * zt[k, i]
                        for j in range(i, d):
                            gloc[i, j] += qi * zt[k, j]
            gsub[s] = gloc
            osub[s] = oloc

    @njit(cache=True, fastmath=True)
    def _secular_root(delta, w2, lo, hi, kl, has_right, scale_abs):
        """Root of 1 + sum_j w2_j / (delta_j - mu) = 0 on the bracket (lo, hi).

        delta are pole offsets relative to the anchor pole; kl is the index
        of the pole left of the bracket and has_right says whether a pole
        bounds it on the right (false only for the last interval).  Each step
        fits a two-pole surrogate whose value and derivative match the
        left-side and right-side pole sums separately, then solves the
        resulting quadratic; bisection on the sign of f safeguards every
        step.  Stops when f is at the noise level of its own evaluation or
        the bracket collapses in offset coordinates; roots must be resolved
        relative to their own pole offset, because the weight reconstruction
        is ill-conditioned in absolute terms when poles cluster.
        """
        d = delta.shape[0]
        eps = 2.220446049250313e-16
        mu = 0.5 * (lo + hi)
        prev = np.inf
        for _ in range(96):
            f = 1.0
            fabs = 1.0
            psi_v = 0.0
            psi_d = 0.0
            phi_v = 0.0
            phi_d = 0.0
            for j in range(d):
                dj = delta[j] - mu
                if dj == 0.0:
                    dj = 1e-300
                inv = 1.0 / dj
                t = w2[j] * inv
                f += t
                fabs += abs(t)
                if j <= kl:
                    psi_v += t
                    psi_d += t * inv
                else:
                    phi_v += t
                    phi_d += t * inv
            if abs(f) <= 8.0 * eps * fabs:
                return mu
            if f < 0.0:
                lo = mu
            else:
                hi = mu
            if hi - lo <= 2.0 * eps * (abs(lo) + abs(hi)) + 1e-300:
                return 0.5 * (lo + hi)
            nxt = 0.5 * (lo + hi)
            if psi_d > 0.0:
                s_w = psi_v * psi_v / psi_d
                p = mu + psi_v / psi_d
                if has_right:
                    if phi_d > 0.0:
                        r_w = phi_v * phi_v / phi_d
                        q = mu + phi_v / phi_d
                        bb = -(p + q + s_w + r_w)
                        cc = p * q + s_w * q + r_w * p
                        disc = bb * bb - 4.0 * cc
                        if disc >= 0.0:
                            sq = np.sqrt(disc)
                            qq = -0.5 * (bb + sq) if bb >= 0.0 else -0.5 * (bb - sq)
                            if lo < qq < hi:
                                nxt = qq
                            elif qq != 0.0:
                                r2 = cc / qq
                                if lo < r2 < hi:
                                    nxt = r2
                else:
                    r1 = p + s_w
                    if lo < r1 < hi:
                        nxt = r1
            # stall or two-cycle at double resolution: no further progress
            if nxt == mu or nxt == prev:
                return nxt
            prev = mu
            mu = nxt
        return mu

    @njit(cache=True, parallel=True, fastmath=True)
    def _rank1_pass_nb(dvals, wmat, gsub, osub):
        nb_items, d = wmat.shape
        nsub = gsub.shape[0]
        # pole differences and their reciprocals, shared across the batch
        pdif = np.empty((d, d))
        rdif = np.empty((d, d))
        dabs = 1.0
        for i in range(d):
            if abs(dvals[i]) > dabs:
                dabs = abs(dvals[i])
            for j in range(d):
                pdif[i, j] = dvals[i] - dvals[j]
                rdif[i, j] = 1.0 / pdif[i, j] if i != j else 0.0
        for s in prange(nsub):
            lo_b = s * SUBCHUNK
            hi_b = min(lo_b + SUBCHUNK, nb_items)
            gloc = np.zeros((d, d))
            oloc = 0.0
            w = np.empty(d)
            w2 = np.empty(d)
            mu = np.empty(d)
            anchor = np.empty(d, dtype=np.int64)
            what = np.empty(d)
            q = np.empty(d)
            delta = np.empty(d)
            for b in range(lo_b, hi_b):
                rho = 0.0
                for j in range(d):
                    w[j] = wmat[b, j]
                    rho += w[j] * w[j]
                if rho <= 1e-100:
                    # negligible update: eigensystem is (D, identity)
                    for k in range(d):
                        gloc[k, k] += _psi_s(dvals[k])
                        oloc += _Psi_s(dvals[k])
                    continue
                # numba binds globals at compile time; keep the literal inline
                wfloor = 1e-13 * np.sqrt(rho)
                for j in range(d):
                    if abs(w[j]) < wfloor:
                        w[j] = wfloor if w[j] >= 0.0 else -wfloor
                    w2[j] = w[j] * w[j]
                rho = 0.0
                for j in range(d):
                    rho += w2[j]
                # roots: one in (dvals[k], dvals[k+1]), last in (dvals[d-1], +rho);
                # the last gap is rho itself, never a subtraction (cancellation)
                for k in range(d):
                    gap = (dvals[k + 1] - dvals[k]) if k < d - 1 else rho
                    # midpoint sign decides the anchor pole
                    mid = 0.5 * gap
                    f = 1.0
                    for j in range(d):
                        f += w2[j] / (pdif[j, k] - mid)
                    if f >= 0.0 or k == d - 1:
                        a = k
                        lo_mu, hi_mu = 0.0, mid if (f >= 0.0 and k < d - 1) else gap
                        for j in range(d):
                            delta[j] = pdif[j, k]
                    else:
                        a = k + 1
                        lo_mu, hi_mu = -gap + mid, 0.0
                        for j in range(d):
                            delta[j] = pdif[j, k + 1]
                    anchor[k] = a
                    mu[k] = _secular_root(delta, w2, lo_mu, hi_mu, k, k < d - 1, dabs + rho)
                # Gu-Eisenstat weights: exact eigensystem of a nearby matrix
                for k in range(d):
                    p = 1.0
                    for j in range(d):
                        lam_minus_dk = pdif[anchor[j], k] + mu[j]
                        if j == k:
                            p *= lam_minus_dk
                        else:
                            p *= lam_minus_dk * rdif[j, k]
                    if p < 0.0:
                        p = -p
                    if p < 1e-290:
                        p = 1e-290
                    what[k] = np.sqrt(p) if w[k] >= 0.0 else -np.sqrt(p)
                for k in range(d):
                    lam = dvals[anchor[k]] + mu[k]
                    nrm = 0.0
                    for j in range(d):
                        dj = pdif[j, anchor[k]] - mu[k]
                        if dj == 0.0:
                            dj = 1e-300
                        q[j] = what[j] / dj
                        nrm += q[j] * q[j]
                    inv = 1.0 / np.sqrt(nrm)
                    c = _psi_s(lam)
                    oloc += _Psi_s(lam)
                    for i in range(d):
                        qi = c * q[i] * inv
                        for j in range(i, d):
                            gloc[i, j] += qi * (q[j] * inv)
            gsub[s] = gloc
            osub[s] = oloc


def _symmetrize_upper(g):
    return np.triu(g) + np.triu(g, 1).T


def dense_pass(values: np.ndarray, u: np.ndarray, theta: float):
    """Sum of psi(theta (H_b - U)) and of tr Psi(theta (H_b - U)) over the batch."""
    if not HAVE_NUMBA:
        return dense_pass_np(values, u, theta)
    nb_items, d = values.shape[0], values.shape[1]
    nsub = (nb_items + SUBCHUNK - 1) // SUBCHUNK
    gsub = np.zeros((nsub, d, d))
    osub = np.zeros(nsub)
    _dense_pass_nb(values, u, float(theta), gsub, osub)
    g = np.zeros((d, d))
    for s in range(nsub):
        g += gsub[s]
    return _symmetrize_upper(g), float(osub.sum())


def regularize_poles(dvals: np.ndarray) -> np.ndarray:
    """Enforce strictly increasing poles; perturbation is O(d * GAP_REL * scale)."""
    scale = max(1.0, float(np.max(np.abs(dvals))) if dvals.size else 1.0)
    gap = GAP_REL * scale
    out = np.array(dvals, dtype=float)
    for i in range(1, out.shape[0]):
        if out[i] < out[i - 1] + gap:
            out[i] = out[i - 1] + gap
    return out


def rank1_pass(dvals: np.ndarray, wmat: np.ndarray):
    """Sum of psi(diag(D) + w_b w_b^T) and of tr Psi(...) over rows of wmat.

    D must be strictly increasing (see :func:`regularize_poles`).
    """
    if not HAVE_NUMBA:
        return rank1_pass_np(dvals, wmat)
    nb_items, d = wmat.shape
    nsub = (nb_items + SUBCHUNK - 1) // SUBCHUNK
    gsub = np.zeros((nsub, d, d))
    osub = np.zeros(nsub)
    _rank1_pass_nb(np.ascontiguousarray(dvals, dtype=float), np.ascontiguousarray(wmat, dtype=float), gsub, osub)
    g = np.zeros((d, d))
    for s in range(nsub):
        g += gsub[s]
    return _symmetrize_upper(g), float(osub.sum())


def masked_pass(zmat: np.ndarray, mask: np.ndarray, u: np.ndarray, theta: float):
    """Sum of psi(theta (mask * z_b z_b^T - U)) and of tr Psi(...) over rows."""
    if not HAVE_NUMBA:
        return masked_pass_np(zmat, mask, u, theta)
    nb_items, d = zmat.shape
    nsub = (nb_items + SUBCHUNK - 1) // SUBCHUNK
    gsub = np.zeros((nsub, d, d))
    osub = np.zeros(nsub)
    _masked_pass_nb(
        np.ascontiguousarray(zmat, dtype=float),
        np.ascontiguousarray(mask, dtype=float),
        np.ascontiguousarray(u, dtype=float),
        float(theta),
        gsub,
        osub,
    )
    g = np.zeros((d, d))
    for s in range(nsub):
        g += gsub[s]
    return _symmetrize_upper(g), float(osub.sum())
