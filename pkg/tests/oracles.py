"""Dense reference computations, independent of the Kalman recursions."""

import numpy as np
from scipy.linalg import solve_banded

KAPPA = 1e8


def stacked_system(model, series):
    """Stack all states of all steps into one Gaussian vector.

    Returns mean ``mu``, diffuse loading ``A``, non-diffuse covariance
    ``S_u``, observation matrix ``C``, noise variances ``h`` and responses
    ``y`` of the observed entries.
    """
    a0, P0s, P0i, T, Q, Z = model.augmented()
    ma, n = a0.size, series.n_steps
    dirs = [i for i in range(ma) if P0i[i, i] > 0]
    mu = np.zeros((n, ma))
    A = np.zeros((n, ma, len(dirs)))
    V = np.zeros((n, ma, ma))
    mu[0] = a0
    A[0][dirs, range(len(dirs))] = 1.0
    V[0] = P0s
    for j in range(1, n):
        mu[j] = T[j - 1] @ mu[j - 1]
        A[j] = T[j - 1] @ A[j - 1]
        V[j] = T[j - 1] @ V[j - 1] @ T[j - 1].T + Q[j - 1]
    N = n * ma
    S = np.zeros((N, N))
    for i in range(n):
        S[i * ma:(i + 1) * ma, i * ma:(i + 1) * ma] = V[i]
        Phi = np.eye(ma)
        for j in range(i + 1, n):
            Phi = T[j - 1] @ Phi
            blk = Phi @ V[i]
            S[j * ma:(j + 1) * ma, i * ma:(i + 1) * ma] = blk
            S[i * ma:(i + 1) * ma, j * ma:(j + 1) * ma] = blk.T
    obs = np.flatnonzero(~np.isnan(series.values))
    C = np.zeros((obs.size, N))
    for r, e in enumerate(obs):
        j = series.steps[e]
        C[r, j * ma:(j + 1) * ma] = Z[e]
    return mu.reshape(N), A.reshape(N, -1), S, C, model.H[obs], series.values[obs], ma, n


def dense_smoother(model, series, kappa=KAPPA):
    """Condition the stacked Gaussian on the data with diffuse variance ``kappa``.

    The diffuse coefficients are handled through their posterior precision
    ``I/kappa + A'C'S^-1 CA`` so that no matrix carries ``kappa`` explicitly.
    """
    mu, A, Su, C, h, y, ma, n = stacked_system(model, series)
    S = C @ Su @ C.T + np.diag(h)
    Sinv = np.linalg.inv(S)
    CA = C @ A
    resid = y - C @ mu
    prec = np.eye(A.shape[1]) / kappa + CA.T @ Sinv @ CA
    dhat = np.linalg.solve(prec, CA.T @ Sinv @ resid)
    G = Su @ C.T @ Sinv
    mean = mu + A @ dhat + G @ (resid - CA @ dhat)
    Vu = Su - G @ C @ Su
    B = A - G @ CA
    cov = Vu + B @ np.linalg.solve(prec, B.T)
    means = mean.reshape(n, ma)
    covs = np.array([cov[j * ma:(j + 1) * ma, j * ma:(j + 1) * ma] for j in range(n)])
    return means, covs


def dense_marginal_loglik(model, series):
    """Log-density of the data projected orthogonally off the diffuse regressors."""
    mu, A, Su, C, h, y, ma, n = stacked_system(model, series)
    S = C @ Su @ C.T + np.diag(h)
    X = C @ A
    r = y - C @ mu
    Sinv = np.linalg.inv(S)
    XtSX = X.T @ Sinv @ X
    P = Sinv - Sinv @ X @ np.linalg.solve(XtSX, X.T @ Sinv)
    nn, d = y.size, X.shape[1]
    return (-0.5 * (nn - d) * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(S)[1]
            - 0.5 * np.linalg.slogdet(XtSX)[1] + 0.5 * np.linalg.slogdet(X.T @ X)[1]
            - 0.5 * r @ P @ r)


def reinsch_spline(t, y, alpha):
    """Natural cubic smoothing spline values at the knots ``t``.

    Minimises ``sum (y - g)^2 + alpha * int g''^2`` by solving the banded
    system ``(R + alpha Q'Q) gamma = Q'y`` and returning ``y - alpha Q gamma``.
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    n = t.size
    h = np.diff(t)
    Qm = np.zeros((n, n - 2))
    R = np.zeros((n - 2, n - 2))
    for k in range(1, n - 1):
        c = k - 1
        Qm[k - 1, c] = 1.0 / h[k - 1]
        Qm[k, c] = -1.0 / h[k - 1] - 1.0 / h[k]
        Qm[k + 1, c] = 1.0 / h[k]
        R[c, c] = (h[k - 1] + h[k]) / 3.0
        if c + 1 < n - 2:
            R[c, c + 1] = R[c + 1, c] = h[k] / 6.0
    M = R + alpha * Qm.T @ Qm
    # M is pentadiagonal; solve in banded storage.
    ab = np.zeros((5, n - 2))
    for off in range(-2, 3):
        diag = np.diagonal(M, off)
        if off >= 0:
            ab[2 - off, off:] = diag
        else:
            ab[2 - off, :off] = diag
    gamma = solve_banded((2, 2), ab, Qm.T @ y)
    return y - alpha * Qm @ gamma


def random_instance(rng, max_m=4, max_k=3, max_n=12, regressors=True, p_missing=0.2):
    """A small random SSM with data, guaranteed to identify its diffuse part."""
    from growthssm.ssm import ObservationSeries, StateSpaceModel, TimeGrid

    while True:
        m = int(rng.integers(1, max_m + 1))
        K = int(rng.integers(1, max_k + 1))
        n = int(rng.integers(3, max_n + 1))
        k = int(rng.integers(0, 2)) if regressors else 0
        times = np.cumsum(np.r_[0.0, rng.uniform(0.3, 2.0, n - 1)])
        T = np.array([np.eye(m) + 0.3 * rng.standard_normal((m, m)) for _ in range(n - 1)])
        Q = []
        for _ in range(n - 1):
            L = rng.standard_normal((m, int(rng.integers(0, m + 1))))
            Q.append(0.5 * L @ L.T)
        Q = np.array(Q).reshape(n - 1, m, m)
        steps, reps = [], []
        for j in range(n):
            for r in range(K):
                if rng.random() < 0.85:
                    steps.append(j)
                    reps.append(str(r + 1))
        if not steps:
            continue
        nobs = len(steps)
        Z = rng.standard_normal((nobs, m)) * (rng.random((nobs, m)) < 0.8)
        H = rng.uniform(0.05, 1.0, nobs)
        y = rng.standard_normal(nobs) * 2
        y[rng.random(nobs) < p_missing] = np.nan
        X = rng.standard_normal((nobs, k)) if k else None
        nd = int(rng.integers(0, m + 1))
        diffuse = tuple(sorted(rng.choice(m, nd, replace=False).tolist()))
        L0 = rng.standard_normal((m, m))
        series = ObservationSeries(TimeGrid(times), np.array(steps), tuple(reps), y,
                                   regressors=X)
        model = StateSpaceModel(times, np.array(steps), Z, H, T, Q,
                                rng.standard_normal(m), 0.3 * L0 @ L0.T, diffuse, X)
        mu, A, Su, C, h, yy, ma, nn = stacked_system(model, series)
        if A.shape[1] and (yy.size < A.shape[1] + 1
                           or np.linalg.matrix_rank(C @ A, tol=1e-6) < A.shape[1]):
            continue
        if A.shape[1] and np.linalg.cond(C @ A) > 1e4:
            continue
        return model, series
