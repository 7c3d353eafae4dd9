"""Compiled recursions of the exact diffuse univariate Kalman filter/smoother.

Observations are processed one scalar at a time, which is valid because the
observation noise is diagonal. The state covariance is carried as a finite
part ``Ps`` and a diffuse part ``Pi`` (the coefficient of the infinite prior
variance); the diffuse phase ends once ``Pi`` has been reduced to zero.

A second, augmented form carries the diffuse directions as regression
columns next to a filter started at zero for them. It never divides by the
diffuse innovation variance and is used for the marginal likelihood and the
smoother.

Entry kinds: 0 missing, 1 absorbed diffuse information, 2 regular update,
3 skipped (no information in either part), 4 exact constraint on the diffuse
coefficients (noise-free observation).
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)

MISSING, DIFFUSE, REGULAR, SKIPPED, CONSTRAINT = 0, 1, 2, 3, 4
OK, SINGULAR, NEGATIVE_VARIANCE = 0, 1, 2

# Diffuse innovation variances at or below this count as zero.
FINF_TOL = 1e-12
# Regular innovation variances at or below this are singular.
F_TOL = 1e-14
# Negative diagonal covariance entries within this (relative) margin clamp to 0.
NEG_TOL = 1e-10


@njit(cache=True, nogil=True)
def _sandwich(T, P, W, out):
    """out = T P T' exploiting zeros in T."""
    m = P.shape[0]
    W[:, :] = 0.0
    for i in range(m):
        for k in range(m):
            t = T[i, k]
            if t != 0.0:
                for l in range(m):
                    W[i, l] += t * P[k, l]
    out[:, :] = 0.0
    for l in range(m):
        for k in range(m):
            t = T[l, k]
            if t != 0.0:
                for i in range(m):
                    out[i, l] += t * W[i, k]


@njit(cache=True, nogil=True)
def _matvec_sparse(P, z, out):
    """out = P z' for sparse z."""
    m = P.shape[0]
    out[:] = 0.0
    for k in range(m):
        zk = z[k]
        if zk != 0.0:
            for i in range(m):
                out[i] += zk * P[i, k]


@njit(cache=True, nogil=True)
def _dot_sparse(z, x):
    s = 0.0
    for k in range(z.size):
        if z[k] != 0.0:
            s += z[k] * x[k]
    return s


@njit(cache=True, nogil=True)
def _symmetrize_clamp(P, ref):
    """Symmetrise P in place; return False on a negative diagonal beyond tolerance."""
    m = P.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            s = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = s
            P[j, i] = s
    tol = NEG_TOL * max(1.0, ref)
    for i in range(m):
        if P[i, i] < 0.0:
            if P[i, i] < -tol:
                return False
            P[i, i] = 0.0
    return True


@njit(cache=True, nogil=True)
def _clamp_diag(P, ref):
    tol = NEG_TOL * max(1.0, ref)
    for i in range(P.shape[0]):
        if P[i, i] < 0.0:
            if P[i, i] < -tol:
                return False
            P[i, i] = 0.0
    return True


@njit(cache=True, nogil=True)
def _max_diag(P):
    s = 0.0
    for i in range(P.shape[0]):
        s = max(s, abs(P[i, i]))
    return s


@njit(cache=True, nogil=True)
def diffuse_filter_kernel(a0, P0s, P0i, T, Q, Z, H, y, ptr, D0, store):
    """Run the filter; see ``growthssm.kalman.diffuse_filter`` for semantics.

    ``ptr[j]:ptr[j+1]`` indexes the entries of step ``j``. ``D0`` selects the
    diffuse directions (columns) and is propagated to accumulate the
    regression cross-product ``X'X`` of the observations on those directions.
    """
    n = ptr.size - 1
    ma = a0.size
    nobs = y.size
    d_total = D0.shape[1]
    ns = n if store else 1

    v = np.zeros(nobs)
    Fs = np.zeros(nobs)
    Fi = np.zeros(nobs)
    kind = np.zeros(nobs, dtype=np.int8)
    Ms_out = np.zeros((nobs if store else 1, ma))
    Mi_out = np.zeros((nobs if store else 1, ma))
    a_pred = np.zeros((ns, ma))
    Ps_pred = np.zeros((ns, ma, ma))
    Pi_pred = np.zeros((ns, ma, ma))
    a_filt = np.zeros((ns, ma))
    Ps_filt = np.zeros((ns, ma, ma))
    diffuse_after = np.zeros(ns, dtype=np.bool_)

    a = a0.copy()
    Ps = P0s.copy()
    Pi = P0i.copy()
    D = D0.copy()
    W = np.zeros((ma, ma))
    tmp = np.zeros((ma, ma))
    Ms = np.zeros(ma)
    Mi = np.zeros(ma)
    x = np.zeros(d_total)
    XtX = np.zeros((d_total, d_total))

    diffuse = d_total > 0
    d_abs = 0
    loglik = 0.0
    sum_log_fi = 0.0
    status = OK
    status_step = -1

    for j in range(n):
        if j > 0:
            Tj = T[j - 1]
            for i in range(ma):
                s = 0.0
                for k in range(ma):
                    if Tj[i, k] != 0.0:
                        s += Tj[i, k] * a[k]
                tmp[0, i] = s
            for i in range(ma):
                a[i] = tmp[0, i]
            _sandwich(Tj, Ps, W, tmp)
            for i in range(ma):
                for k in range(ma):
                    Ps[i, k] = tmp[i, k] + Q[j - 1, i, k]
            if diffuse:
                _sandwich(Tj, Pi, W, tmp)
                Pi[:, :] = tmp
            Dn = np.zeros((ma, d_total))
            for i in range(ma):
                for k in range(ma):
                    if Tj[i, k] != 0.0:
                        for c in range(d_total):
                            Dn[i, c] += Tj[i, k] * D[k, c]
            D = Dn
        if store:
            a_pred[j] = a
            Ps_pred[j] = Ps
            Pi_pred[j] = Pi
        for e in range(ptr[j], ptr[j + 1]):
            yi = y[e]
            if math.isnan(yi):
                kind[e] = MISSING
                continue
            z = Z[e]
            for c in range(d_total):
                s = 0.0
                for k in range(ma):
                    if z[k] != 0.0:
                        s += z[k] * D[k, c]
                x[c] = s
            for c in range(d_total):
                for c2 in range(d_total):
                    XtX[c, c2] += x[c] * x[c2]
            _matvec_sparse(Ps, z, Ms)
            fs = _dot_sparse(z, Ms) + H[e]
            vi = yi - _dot_sparse(z, a)
            fi = 0.0
            if diffuse:
                _matvec_sparse(Pi, z, Mi)
                fi = _dot_sparse(z, Mi)
            v[e] = vi
            Fs[e] = fs
            Fi[e] = fi
            if store:
                Ms_out[e] = Ms
                if diffuse:
                    Mi_out[e] = Mi
            ref = max(_max_diag(Ps), 1.0)
            if diffuse and fi > FINF_TOL:
                kind[e] = DIFFUSE
                d_abs += 1
                sum_log_fi += math.log(fi)
                for i in range(ma):
                    ki = Mi[i] / fi
                    a[i] += ki * vi
                for i in range(ma):
                    ki = Mi[i] / fi
                    for k in range(ma):
                        kk = Mi[k] / fi
                        Ps[i, k] += ki * kk * fs - (Ms[i] * kk + ki * Ms[k])
                        Pi[i, k] -= Mi[i] * Mi[k] / fi
                ref = max(ref, _max_diag(Ps))
                if not _symmetrize_clamp(Ps, ref):
                    status = NEGATIVE_VARIANCE
                    status_step = j
                    break
                _symmetrize_clamp(Pi, 1.0)
                if d_abs >= d_total or _max_diag(Pi) <= FINF_TOL:
                    diffuse = False
                    Pi[:, :] = 0.0
            elif fs > F_TOL:
                kind[e] = REGULAR
                loglik -= 0.5 * (LOG_2PI + math.log(fs) + vi * vi / fs)
                for i in range(ma):
                    a[i] += Ms[i] / fs * vi
                for i in range(ma):
                    for k in range(ma):
                        Ps[i, k] -= Ms[i] * Ms[k] / fs
                if not _symmetrize_clamp(Ps, ref):
                    status = NEGATIVE_VARIANCE
                    status_step = j
                    break
            elif diffuse:
                kind[e] = SKIPPED
            else:
                status = SINGULAR
                status_step = j
                break
        if status != OK:
            break
        if store:
            a_filt[j] = a
            Ps_filt[j] = Ps
            diffuse_after[j] = diffuse
    return (status, status_step, loglik, sum_log_fi, d_abs, XtX, v, Fs, Fi, kind,
            Ms_out, Mi_out, a_pred, Ps_pred, Pi_pred, a_filt, Ps_filt, diffuse_after)


@njit(cache=True, nogil=True)
def augmented_filter_kernel(a0, P0s, T, Q, Z, H, y, ptr, D0, store):
    """Filter for the state given diffuse coefficients ``delta = 0`` plus columns.

    The predicted state given ``delta`` is ``a + A delta``. Innovations are
    ``v0 - x delta`` with ``x = z A``; ``S`` and ``s`` accumulate
    ``sum x'x / F`` and ``sum x' v0 / F``. ``XtX`` accumulates the raw
    regression rows ``z D`` of the observations on ``delta``, and ``gs_*``
    count and log-measure the rows that add a new direction (the diffuse
    innovation variances of the two-part recursion).
    """
    n = ptr.size - 1
    ma = a0.size
    d = D0.shape[1]
    nobs = y.size
    ns = n if store else 1
    ne = nobs if store else 1

    v0 = np.zeros(nobs)
    F = np.zeros(nobs)
    xs = np.zeros((nobs, d))
    kind = np.zeros(nobs, dtype=np.int8)
    M_out = np.zeros((ne, ma))
    a_pred = np.zeros((ns, ma))
    A_pred = np.zeros((ns, ma, d))
    P_pred = np.zeros((ns, ma, ma))
    a_filt = np.zeros((ns, ma))
    A_filt = np.zeros((ns, ma, d))
    P_filt = np.zeros((ns, ma, ma))
    S_filt = np.zeros((ns, d, d))
    s_filt = np.zeros((ns, d))

    a = a0.copy()
    P = P0s.copy()
    A = D0.copy()
    D = D0.copy()
    W = np.zeros((ma, ma))
    tmp = np.zeros((ma, ma))
    M = np.zeros(ma)
    x = np.zeros(d)
    xr = np.zeros(d)
    S = np.zeros((d, d))
    svec = np.zeros(d)
    XtX = np.zeros((d, d))
    U = np.zeros((d, d))
    n_gs = 0
    gs_logdet = 0.0
    sum_logF = 0.0
    status = OK
    status_step = -1

    for j in range(n):
        if j > 0:
            Tj = T[j - 1]
            an = np.zeros(ma)
            An = np.zeros((ma, d))
            Dn = np.zeros((ma, d))
            for i in range(ma):
                for k in range(ma):
                    t = Tj[i, k]
                    if t != 0.0:
                        an[i] += t * a[k]
                        for c in range(d):
                            An[i, c] += t * A[k, c]
                            Dn[i, c] += t * D[k, c]
            a = an
            A = An
            D = Dn
            _sandwich(Tj, P, W, tmp)
            for i in range(ma):
                for k in range(ma):
                    P[i, k] = tmp[i, k] + Q[j - 1, i, k]
            _symmetrize_clamp(P, _max_diag(P))
        if store:
            a_pred[j] = a
            A_pred[j] = A
            P_pred[j] = P
        for e in range(ptr[j], ptr[j + 1]):
            yi = y[e]
            if math.isnan(yi):
                kind[e] = MISSING
                continue
            z = Z[e]
            for c in range(d):
                s1 = 0.0
                s2 = 0.0
                for k in range(ma):
                    if z[k] != 0.0:
                        s1 += z[k] * A[k, c]
                        s2 += z[k] * D[k, c]
                x[c] = s1
                xr[c] = s2
            # raw regression rows: cross-product and new-direction test
            for c in range(d):
                for c2 in range(d):
                    XtX[c, c2] += xr[c] * xr[c2]
            if n_gs < d:
                w = xr.copy()
                for b in range(n_gs):
                    proj = 0.0
                    for c in range(d):
                        proj += U[b, c] * xr[c]
                    for c in range(d):
                        w[c] -= proj * U[b, c]
                nw = 0.0
                for c in range(d):
                    nw += w[c] * w[c]
                if nw > FINF_TOL:
                    gs_logdet += math.log(nw)
                    sq = math.sqrt(nw)
                    for c in range(d):
                        U[n_gs, c] = w[c] / sq
                    n_gs += 1
            _matvec_sparse(P, z, M)
            f = _dot_sparse(z, M) + H[e]
            vi = yi - _dot_sparse(z, a)
            v0[e] = vi
            F[e] = f
            for c in range(d):
                xs[e, c] = x[c]
            if store:
                M_out[e] = M
            if f > F_TOL:
                kind[e] = REGULAR
                ref = max(_max_diag(P), 1.0)
                sum_logF += math.log(f)
                for i in range(ma):
                    a[i] += M[i] / f * vi
                    for c in range(d):
                        A[i, c] -= M[i] * x[c] / f
                # (M[i] * M[k]) * finv is symmetric in i, k bit for bit
                finv = 1.0 / f
                for i in range(ma):
                    mi = M[i]
                    if mi != 0.0:
                        for k in range(ma):
                            P[i, k] -= (mi * M[k]) * finv
                for c in range(d):
                    svec[c] += x[c] * vi / f
                    for c2 in range(d):
                        S[c, c2] += x[c] * x[c2] / f
                if not _clamp_diag(P, ref):
                    status = NEGATIVE_VARIANCE
                    status_step = j
                    break
            else:
                nx = 0.0
                for c in range(d):
                    nx += x[c] * x[c]
                kind[e] = CONSTRAINT if nx > 0.0 else SKIPPED
        if status != OK:
            break
        if store:
            a_filt[j] = a
            A_filt[j] = A
            P_filt[j] = P
            S_filt[j] = S
            s_filt[j] = svec
    return (status, status_step, v0, F, xs, kind, S, svec, XtX, sum_logF, n_gs, gs_logdet,
            M_out, a_pred, A_pred, P_pred, a_filt, A_filt, P_filt, S_filt, s_filt)


@njit(cache=True, nogil=True)
def augmented_smoother_kernel(T, Z, ptr, v0, F, xs, kind, M, a_pred, A_pred, P_pred,
                              delta, delta_cov):
    """Backward pass given the estimated diffuse coefficients and their covariance.

    With ``r(delta) = r0 - R delta`` the smoothed state is
    ``a + P r0 + (A - P R) delta`` and its covariance is
    ``P - P N P + (A - P R) V (A - P R)'``.
    """
    n = ptr.size - 1
    ma = a_pred.shape[1]
    d = delta.size
    r = np.zeros(ma)
    R = np.zeros((ma, d))
    N = np.zeros((ma, ma))
    W = np.zeros((ma, ma))
    tmp = np.zeros((ma, ma))
    a_s = np.zeros((n, ma))
    V_s = np.zeros((n, ma, ma))
    status = OK
    for j in range(n - 1, -1, -1):
        if j < n - 1:
            Tt = T[j].T.copy()
            r = Tt @ r
            R = Tt @ R
            _sandwich(Tt, N, W, tmp)
            N[:, :] = tmp
        for e in range(ptr[j + 1] - 1, ptr[j] - 1, -1):
            if kind[e] != REGULAR:
                continue
            z = Z[e]
            f = F[e]
            K = M[e] / f
            # L' u = u - z (K . u)
            kr = K @ r
            for i in range(ma):
                r[i] += z[i] * (v0[e] / f - kr)
            for c in range(d):
                kr = 0.0
                for i in range(ma):
                    kr += K[i] * R[i, c]
                for i in range(ma):
                    R[i, c] += z[i] * (xs[e, c] / f - kr)
            NK = N @ K
            c0 = K @ NK
            for i in range(ma):
                for l in range(ma):
                    N[i, l] += (-NK[i] * z[l] - z[i] * NK[l]
                                + z[i] * z[l] * (c0 + 1.0 / f))
        P = P_pred[j]
        B = A_pred[j] - P @ R
        a_s[j] = a_pred[j] + P @ r + B @ delta
        V = P - P @ N @ P + B @ delta_cov @ B.T
        if not _symmetrize_clamp(V, max(1.0, _max_diag(P))):
            status = NEGATIVE_VARIANCE
        V_s[j] = V
    return status, a_s, V_s


@njit(cache=True, nogil=True)
def augmented_finish_kernel(S, svec, v0, F, xs, kind, XtX):
    """GLS fit of the diffuse coefficients without constraints.

    Returns ``(ok, delta, logdet_S, logdet_XtX, rss, n_regular)``; ``ok`` is
    False when ``S`` or ``X'X`` is not numerically positive definite.
    """
    d = S.shape[0]
    delta = np.zeros(d)
    if d == 0:
        logdet_s = 0.0
        logdet_x = 0.0
    else:
        L = np.zeros((d, d))
        Lx = np.zeros((d, d))
        ok = _chol(S, L) and _chol(XtX, Lx)
        if not ok:
            return False, delta, 0.0, 0.0, 0.0, 0
        logdet_s = 0.0
        logdet_x = 0.0
        for i in range(d):
            logdet_s += 2.0 * math.log(L[i, i])
            logdet_x += 2.0 * math.log(Lx[i, i])
        # forward then backward substitution
        w = np.zeros(d)
        for i in range(d):
            acc = svec[i]
            for k in range(i):
                acc -= L[i, k] * w[k]
            w[i] = acc / L[i, i]
        for i in range(d - 1, -1, -1):
            acc = w[i]
            for k in range(i + 1, d):
                acc -= L[k, i] * delta[k]
            delta[i] = acc / L[i, i]
    rss = 0.0
    n_reg = 0
    for e in range(v0.size):
        if kind[e] == REGULAR:
            r = v0[e]
            for c in range(d):
                r -= xs[e, c] * delta[c]
            rss += r * r / F[e]
            n_reg += 1
    return True, delta, logdet_s, logdet_x, rss, n_reg


@njit(cache=True, nogil=True)
def _chol(A, L):
    """Lower Cholesky factor with a relative pivot floor; False if not PD."""
    d = A.shape[0]
    scale = 0.0
    for i in range(d):
        scale = max(scale, abs(A[i, i]))
    if scale == 0.0:
        return False
    for j in range(d):
        acc = A[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 1e-13 * scale:
            return False
        L[j, j] = math.sqrt(acc)
        for i in range(j + 1, d):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    return True
