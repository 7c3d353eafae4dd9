"""Exact diffuse Kalman filtering and smoothing with sequential updates."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .ssm import ModelError, NumericalError, ObservationSeries, StateSpaceModel

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FilterResult:
    """Output of :func:`diffuse_filter`.

    ``loglik`` sums the Gaussian log-densities of the prediction errors of all
    observed scalars that were not used to absorb diffuse directions.
    ``marginal_loglik`` additionally corrects for how the diffuse directions
    were absorbed, giving the likelihood of the data projected off the span
    of the diffuse regressors. It does not depend on which scalars absorbed
    the diffuse part, so it is the objective used for estimation.
    """

    loglik: float
    marginal_loglik: float
    d_absorbed: int
    d_declared: int
    n_used: int
    innovations: np.ndarray
    innovation_var: np.ndarray
    diffuse_var: np.ndarray
    kinds: np.ndarray
    log_det_xtx: float
    sum_log_diffuse_var: float

    @property
    def regular(self) -> np.ndarray:
        return self.kinds == K.REGULAR


@dataclass(frozen=True)
class SmootherResult:
    """Smoothed states at every grid step (``times`` are absolute).

    ``filtered_mean``/``filtered_cov`` condition on data up to each step and
    are NaN until the diffuse directions are identified.
    """

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    state_dim: int
    loglik: float
    marginal_loglik: float
    n_used: int
    d_declared: int
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    origin: float = 0.0

    @property
    def beta(self) -> np.ndarray:
        return self.mean[-1, self.state_dim:]

    @property
    def beta_cov(self) -> np.ndarray:
        return self.cov[-1, self.state_dim:, self.state_dim:]


@dataclass(frozen=True)
class ComponentSeries:
    """A linear combination of the smoothed state over time."""

    times: np.ndarray
    estimate: np.ndarray
    variance: np.ndarray
    name: str = "component"

    def __post_init__(self):
        for attr in ("times", "estimate", "variance"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=float))
        if not (self.times.shape == self.estimate.shape == self.variance.shape):
            raise ModelError("component arrays must share one shape")
        if np.any(self.variance < 0):
            raise ModelError(f"negative variance in component {self.name!r}")

    def __len__(self):
        return self.times.size

    def at(self, times) -> "ComponentSeries":
        """Restrict to the given subset of grid times."""
        idx = np.searchsorted(self.times, times)
        idx = np.clip(idx, 0, self.times.size - 1)
        if not np.allclose(self.times[idx], times, rtol=0, atol=1e-9):
            raise ModelError("requested times are not on the component grid")
        return ComponentSeries(self.times[idx], self.estimate[idx], self.variance[idx], self.name)


def _prepare(model: StateSpaceModel, series: ObservationSeries):
    a0, P0s, P0i, T, Q, Z = model.augmented()
    ma = a0.size
    if Z.shape[0] != series.n_entries:
        raise ModelError("model and series disagree on the number of entries")
    ptr = np.searchsorted(series.steps, np.arange(series.n_steps + 1)).astype(np.int64)
    diffuse_dirs = [i for i in range(ma) if P0i[i, i] > 0]
    D0 = np.zeros((ma, len(diffuse_dirs)))
    for c, i in enumerate(diffuse_dirs):
        D0[i, c] = 1.0
    if T.shape[0] == 0:
        T = np.zeros((1, ma, ma))
        Q = np.zeros((1, ma, ma))
    return (a0, P0s, P0i, np.ascontiguousarray(T), np.ascontiguousarray(Q),
            np.ascontiguousarray(Z), np.ascontiguousarray(model.H, dtype=float),
            np.ascontiguousarray(series.values, dtype=float), ptr, D0)


def _raise_status(status, step, series):
    t = series.times[step] + series.origin if step >= 0 else float("nan")
    if status == K.SINGULAR:
        raise NumericalError(f"singular innovation variance at step {step} (time {t:g})")
    if status == K.NEGATIVE_VARIANCE:
        raise NumericalError(f"covariance lost positive semi-definiteness at step {step} (time {t:g})")


def _gls(S, s, C, c):
    """Generalized least squares for the diffuse coefficients.

    ``C delta = c`` are exact constraints from noise-free observations.
    Returns ``(delta, cov, basis, G)`` with ``G = basis' S basis`` or None when
    the coefficients are not identified.
    """
    d = S.shape[0]
    if C.shape[0]:
        u, sv, vt = np.linalg.svd(C)
        rank = int(np.sum(sv > 1e-10 * max(1.0, sv[0])))
        dc = np.linalg.lstsq(C, c, rcond=None)[0]
        B = vt[rank:].T
    else:
        dc = np.zeros(d)
        B = np.eye(d)
    if B.shape[1] == 0:
        return dc, np.zeros((d, d)), B, np.zeros((0, 0))
    G = B.T @ S @ B
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(L)) ** 2 <= 1e-13 * np.max(np.diag(G)):
        return None
    Li = np.linalg.inv(L)
    Gi = Li.T @ Li
    g = Gi @ (B.T @ (s - S @ dc))
    return dc + B @ g, B @ Gi @ B.T, B, G


class _Augmented:
    """Forward pass of the augmented filter plus the diffuse-coefficient fit.

    ``args`` lets a caller reuse prepared arrays (see :class:`LikelihoodEvaluator`);
    with ``need_cov=False`` and no exact constraints the fit runs compiled and
    skips the coefficient covariance.
    """

    def __init__(self, model, series, store, args=None, need_cov=True):
        if args is None:
            args = _prepare(model, series)
        a0, P0s, P0i, T, Q, Z, H, y, ptr, D0 = args
        out = K.augmented_filter_kernel(a0, P0s, T, Q, Z, H, y, ptr, D0, store)
        _raise_status(out[0], out[1], series)
        (_, _, self.v0, self.F, self.xs, self.kinds, self.S, self.s, XtX, sum_logF,
         n_gs, gs_logdet) = out[:12]
        self.store_out = out[12:]
        self.T, self.Z, self.ptr = T, Z, ptr
        d = D0.shape[1]
        self.d = d
        self.n_used = int(series.n_observed)
        self.n_absorbed = int(n_gs)
        if self.n_used == 0:
            self.delta = np.zeros(d)
            self.delta_cov = np.zeros((d, d))
            self.loglik = self.marginal = 0.0
            self.n_absorbed = 0
            return
        if n_gs < d:
            raise NumericalError(f"data absorbed only {n_gs} of {d} diffuse dimensions")
        cons = self.kinds == K.CONSTRAINT
        if not need_cov and not cons.any():
            ok, self.delta, logdet_g, logdet_x, rss, n_reg = K.augmented_finish_kernel(
                self.S, self.s, self.v0, self.F, self.xs, self.kinds, XtX)
            if not ok:
                raise NumericalError("diffuse directions are not identified by the observed data")
            self.delta_cov = None
            d_free = d
            full_x = logdet_x
        else:
            fit = _gls(self.S, self.s, self.xs[cons], self.v0[cons])
            if fit is None:
                raise NumericalError("diffuse directions are not identified by the observed data")
            self.delta, self.delta_cov, B, G = fit
            reg = self.kinds == K.REGULAR
            e = self.v0[reg] - self.xs[reg] @ self.delta
            rss = float(np.sum(e * e / self.F[reg]))
            n_reg = int(np.count_nonzero(reg))
            d_free = B.shape[1]
            logdet_g = np.linalg.slogdet(G)[1] if d_free else 0.0
            if d_free:
                sign, logdet_x = np.linalg.slogdet(B.T @ XtX @ B)
                if sign <= 0:
                    raise NumericalError("diffuse regressors are collinear in the observed data")
            else:
                logdet_x = 0.0
            full_x = np.linalg.slogdet(XtX)[1] if d else 0.0
        self.marginal = float(-0.5 * ((n_reg - d_free) * LOG_2PI + sum_logF + rss)
                              - 0.5 * logdet_g + 0.5 * logdet_x)
        self.loglik = float(self.marginal + 0.5 * gs_logdet - 0.5 * full_x)


class LikelihoodEvaluator:
    """Likelihood of one data layout under many parameter values.

    Built from a template model; each call supplies ``T``, ``Q`` and ``H``
    shaped like the template's and returns what :func:`likelihood` would
    return for the model carrying them.
    """

    def __init__(self, model: StateSpaceModel, series: ObservationSeries):
        self.series = series
        self.args = list(_prepare(model, series))
        self.m = model.state_dim
        self.k = model.n_regressors

    def __call__(self, T, Q, H, marginal: bool = True) -> float:
        args = list(self.args)
        T = np.asarray(T, dtype=float)
        Q = np.asarray(Q, dtype=float)
        if self.k or T.shape[0] == 0:
            n1, ma = args[3].shape[0], args[0].size
            Ta = np.zeros((n1, ma, ma))
            Qa = np.zeros((n1, ma, ma))
            Ta[:, self.m:, self.m:] = np.eye(self.k)
            if T.shape[0]:
                Ta[:, :self.m, :self.m] = T
                Qa[:, :self.m, :self.m] = Q
            T, Q = Ta, Qa
        args[3], args[4], args[6] = T, Q, np.ascontiguousarray(H, dtype=float)
        aug = _Augmented(None, self.series, False, args=args, need_cov=False)
        return aug.marginal if marginal else aug.loglik


def _finish_filter(out, d_declared, n_entries) -> FilterResult:
    (status, step, loglik, sum_log_fi, d_abs, XtX, v, Fs, Fi, kinds) = out[:10]
    if d_abs < d_declared:
        raise NumericalError(f"data absorbed only {d_abs} of {d_declared} diffuse dimensions")
    n_used = int(np.count_nonzero(kinds == K.REGULAR))
    if d_declared:
        sign, logdet = np.linalg.slogdet(XtX)
        if sign <= 0:
            raise NumericalError("diffuse regressors are collinear in the observed data")
    else:
        logdet = 0.0
    marginal = loglik - 0.5 * sum_log_fi + 0.5 * logdet
    return FilterResult(float(loglik), float(marginal), int(d_abs), d_declared, n_used,
                        v, Fs, Fi, kinds, float(logdet), float(sum_log_fi))


def diffuse_filter(model: StateSpaceModel, series: ObservationSeries) -> FilterResult:
    """Exact diffuse Kalman filter, processing observations one scalar at a time.

    The returned trace (innovations, finite and diffuse innovation variances)
    comes from the two-part covariance recursion. ``marginal_loglik`` is
    computed by the augmented form, which stays accurate when a diffuse
    direction is absorbed by a weakly informative observation.
    Missing responses (NaN) are skipped but the state still propagates. With
    no observed response at all the result carries no information (zero
    log-likelihood, nothing absorbed).
    Raises :class:`NumericalError` when the observed data cannot absorb every
    diffuse dimension or an innovation variance degenerates after the diffuse
    phase.
    """
    args = _prepare(model, series)
    out = K.diffuse_filter_kernel(*args, False)
    _raise_status(out[0], out[1], series)
    if series.n_observed == 0:
        kinds = out[9]
        z = np.zeros(series.n_entries)
        return FilterResult(0.0, 0.0, 0, args[-1].shape[1], 0, z, z.copy(), z.copy(), kinds, 0.0, 0.0)
    res = _finish_filter(out, args[-1].shape[1], series.n_entries)
    aug = _Augmented(model, series, False, need_cov=False)
    return dataclasses.replace(res, marginal_loglik=aug.marginal)


def likelihood(model: StateSpaceModel, series: ObservationSeries, marginal: bool = True) -> float:
    """Marginal (default) or innovations log-likelihood of ``series``.

    Both come from the augmented form. The innovations version drops the
    densities of the scalars that absorbed the diffuse directions.
    """
    aug = _Augmented(model, series, False, need_cov=False)
    return aug.marginal if marginal else aug.loglik


def diffuse_smoother(model: StateSpaceModel, series: ObservationSeries) -> SmootherResult:
    """Exact diffuse fixed-interval smoother.

    Smoothed means and covariances are returned at every grid step, including
    steps whose responses are all missing, so inserting missing entries is
    the way to predict the state at arbitrary times.
    """
    aug = _Augmented(model, series, True)
    M, a_pred, A_pred, P_pred, a_filt, A_filt, P_filt, S_filt, s_filt = aug.store_out
    status, a_s, V_s = K.augmented_smoother_kernel(
        aug.T, aug.Z, aug.ptr, aug.v0, aug.F, aug.xs, aug.kinds, M, a_pred, A_pred, P_pred,
        aug.delta, aug.delta_cov)
    if status != K.OK:
        raise NumericalError("smoothed covariance lost positive semi-definiteness")
    n, ma = a_filt.shape
    fm = np.full((n, ma), np.nan)
    fc = np.full((n, ma, ma), np.nan)
    cons = aug.kinds == K.CONSTRAINT
    for j in range(n):
        if aug.d == 0:
            fm[j], fc[j] = a_filt[j], P_filt[j]
            continue
        upto = np.arange(aug.kinds.size) < aug.ptr[j + 1]
        fit = _gls(S_filt[j], s_filt[j], aug.xs[cons & upto], aug.v0[cons & upto])
        if fit is None:
            continue
        dj, Vj = fit[0], fit[1]
        fm[j] = a_filt[j] + A_filt[j] @ dj
        fc[j] = P_filt[j] + A_filt[j] @ Vj @ A_filt[j].T
    return SmootherResult(series.times + series.origin, a_s, V_s, model.state_dim, aug.loglik,
                          aug.marginal, aug.n_used, aug.d, fm, fc, series.origin)


def extract_component(s: SmootherResult, selector, name: str = "component") -> ComponentSeries:
    """Project the smoothed state on ``selector`` (length = state dimension).

    A selector shorter than the augmented state (regression coefficients
    appended) is padded with zeros.
    """
    w = np.asarray(selector, dtype=float)
    ma = s.mean.shape[1]
    if w.ndim != 1 or w.size not in (s.state_dim, ma):
        raise ModelError(f"selector has length {w.size}, expected {s.state_dim}")
    if w.size < ma:
        w = np.concatenate([w, np.zeros(ma - w.size)])
    est = s.mean @ w
    var = np.einsum("i,tij,j->t", w, s.cov, w)
    var = np.where((var < 0) & (var > -1e-10 * max(1.0, np.abs(var).max())), 0.0, var)
    return ComponentSeries(s.times.copy(), est, var, name)
