"""Maximum marginal likelihood fitting, BIC and model selection."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import interpolate, optimize, special, stats

from .curves import NU_BOUNDS, CurveFamily, CurveParams
from .kalman import (ComponentSeries, LikelihoodEvaluator, SmootherResult, diffuse_smoother,
                     extract_component)
from .models import (GrowthModelSpec, Mode, NoiseParams, build, fme_labels, recover_constant_scale,
                     system_arrays)
from .ssm import Dataset, ModelError, NumericalError, ObservationSeries

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
CURVE_NAMES = ("phi", "rho", "nu")
NOISE_NAMES = ("sigma2_eps", "sigma2_eta", "sigma2_dev")
ALL_NAMES = CURVE_NAMES + NOISE_NAMES
_LOG_NU = (math.log(NU_BOUNDS[0]), math.log(NU_BOUNDS[1]))


def _to_internal(name, v):
    if name in NOISE_NAMES:
        return math.log(max(v - VAR_FLOOR, 1e-300))
    if name == "nu":
        lo, hi = _LOG_NU
        u = (math.log(v) - lo) / (hi - lo)
        u = min(max(u, 1e-15), 1 - 1e-15)
        return math.log(u / (1 - u))
    return math.log(v)


def _from_internal(name, x):
    if name in NOISE_NAMES:
        return VAR_FLOOR + math.exp(min(x, 700.0))
    if name == "nu":
        lo, hi = _LOG_NU
        return math.exp(lo + (hi - lo) * float(special.expit(x)))
    return math.exp(min(x, 700.0))


@dataclass(frozen=True)
class ParamSpace:
    """Free parameters of a spec and the unconstrained coordinates they live in.

    Variances map through ``1e-12 + exp(x)``, ``phi`` and ``rho`` through
    ``exp(x)``, and ``nu`` through a logistic squashing of ``log nu`` onto its
    bounds. ``fixed`` holds values of parameters excluded from the search.
    """

    free: tuple
    fixed: dict = field(default_factory=dict)

    @classmethod
    def for_spec(cls, spec: GrowthModelSpec, fixed: Optional[dict] = None) -> "ParamSpace":
        fixed = dict(fixed or {})
        names = list(spec.family.param_names) + ["sigma2_eps"]
        if spec.mode is Mode.SEMIPARAMETRIC:
            names.append("sigma2_eta")
        if spec.is_fme and spec.K >= 2:
            names.append("sigma2_dev")
        bad = set(fixed) - set(ALL_NAMES)
        if bad:
            raise ModelError(f"unknown parameter(s) {sorted(bad)}")
        return cls(tuple(n for n in names if n not in fixed), fixed)

    @property
    def k(self) -> int:
        return len(self.free)

    def to_internal(self, values: dict) -> np.ndarray:
        return np.array([_to_internal(n, float(values[n])) for n in self.free])

    def to_values(self, x) -> dict:
        out = dict(self.fixed)
        out.update({n: _from_internal(n, float(v)) for n, v in zip(self.free, x)})
        return out

    def apply(self, spec: GrowthModelSpec, values: dict) -> GrowthModelSpec:
        """Spec with curve and noise parameters replaced by ``values`` where given."""
        cur = {n: getattr(spec.curve, n) for n in CURVE_NAMES}
        cur.update({n: values[n] for n in spec.family.param_names if n in values})
        noise = {n: getattr(spec.noise, n) for n in NOISE_NAMES}
        noise.update({n: values[n] for n in NOISE_NAMES if n in values})
        curve = CurveParams(**{n: cur[n] for n in spec.family.param_names})
        return spec.with_params(curve, NoiseParams(**noise))


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "nelder_mead"
    max_evals: int = 4000
    tol: float = 1e-8
    multistart: int = 5
    seed: int = 0
    objective: str = "marginal"

    def __post_init__(self):
        if self.algorithm not in ("nelder_mead", "quasi_newton_fd"):
            raise ModelError(f"unknown algorithm {self.algorithm!r}")
        if self.max_evals <= 0:
            raise ModelError("max_evals must be positive")
        if self.multistart < 1:
            raise ModelError("multistart must be at least 1")
        if self.objective not in ("marginal", "innovations"):
            raise ModelError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    iterations: int
    evaluations: int
    restarts: int
    final_size: float
    message: str
    trace: tuple = ()
    start_logliks: tuple = ()


@dataclass(frozen=True)
class FitResult:
    spec: GrowthModelSpec
    estimates: dict
    free: tuple
    loglik: float
    bic: float
    n_used: int
    d: int
    mean: ComponentSeries
    deviations: tuple
    convergence: ConvergenceReport
    objective: str = "marginal"
    constant_scale: Optional[tuple] = None
    smoother: Optional[SmootherResult] = field(default=None, repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.free)

    @property
    def label(self) -> str:
        tag = f"{self.spec.mode.value} {self.spec.family.value}"
        return tag + (" FME" if self.spec.is_fme else "")


def _as_series(spec: GrowthModelSpec, data, group=None) -> ObservationSeries:
    if isinstance(data, ObservationSeries):
        return data
    if isinstance(data, Dataset):
        labels = spec.replicate_labels or None
        return data.series(group, replicates=labels)
    raise ModelError("data must be a Dataset or an ObservationSeries")


def _pooled(series: ObservationSeries):
    ok = ~np.isnan(series.values)
    t = series.times[series.steps[ok]]
    return t, series.values[ok]


def initial_values(family, data, mode=Mode.SEMIPARAMETRIC, fme: bool = False,
                   group=None) -> dict:
    """Heuristic starting point for every parameter the model could use.

    ``rho`` comes from the time the pooled data need to climb from 10% to 90%
    of their range (ln 81 over that time); ``phi`` and ``nu`` start at 1.
    ``sigma2_eps`` is 10% of the residual variance around a coarse spline and
    ``sigma2_dev`` the between-replicate variance at the last time divided by
    the time span, since a random walk accumulates variance linearly.
    """
    family = CurveFamily.parse(family)
    series = data if isinstance(data, ObservationSeries) else data.series(group)
    t, y = _pooled(series)
    if y.size < 5:
        raise ModelError(f"need at least 5 observed values to start a fit, got {y.size}")
    ut = np.unique(t)
    ybar = np.array([y[t == s].mean() for s in ut])
    span = max(ut[-1] - ut[0], 1e-12)
    rng_y = ybar.max() - ybar.min()
    u = (ybar - ybar.min()) / rng_y if rng_y > 0 else np.zeros_like(ybar)
    if ybar[-1] < ybar[0]:
        u = 1.0 - u
    t10 = ut[np.argmax(u >= 0.1)]
    t90 = ut[np.argmax(u >= 0.9)]
    width = max(t90 - t10, span / 10.0)
    rho0 = math.log(81.0) / width

    resid = _coarse_residual_var(ut, ybar, t, y)
    out = {"phi": 1.0, "rho": rho0, "nu": 1.0,
           "sigma2_eps": max(0.1 * resid, 1e-8 * max(np.var(y), 1e-12)),
           "sigma2_eta": 1.0}
    reps = series.replicate_labels
    if fme and len(reps) >= 2:
        last = series.steps[~np.isnan(series.values)].max()
        vals = series.values[series.step_slice(int(last))]
        vals = vals[~np.isnan(vals)]
        between = float(np.var(vals, ddof=1)) if vals.size >= 2 else 0.0
        out["sigma2_dev"] = max(between / span, 1e-6 * max(np.var(y), 1e-12))
    return out


def _coarse_residual_var(ut, ybar, t, y) -> float:
    if ut.size >= 6:
        n_knots = max(1, min(ut.size // 4, 8))
        knots = np.quantile(ut, np.linspace(0, 1, n_knots + 2)[1:-1])
        try:
            spl = interpolate.LSQUnivariateSpline(ut, ybar, knots, k=3)
            return float(np.mean((y - spl(t)) ** 2))
        except ValueError:
            pass
    coef = np.polyfit(t, y, 1)
    return float(np.mean((y - np.polyval(coef, t)) ** 2))


class _Objective:
    """Negative log-likelihood over internal coordinates, with bookkeeping."""

    def __init__(self, spec, space, series, marginal):
        self.spec, self.space, self.series, self.marginal = spec, space, series, marginal
        self.evals = 0
        self.evaluator = LikelihoodEvaluator(build(spec, series), series)

    def loglik(self, x) -> float:
        vals = self.space.to_values(x)
        try:
            T, Q, H = system_arrays(self.space.apply(self.spec, vals), self.series)
            ll = self.evaluator(T, Q, H, marginal=self.marginal)
        except (NumericalError, ModelError, FloatingPointError, np.linalg.LinAlgError):
            return -math.inf
        return ll if math.isfinite(ll) else -math.inf

    def __call__(self, x) -> float:
        self.evals += 1
        ll = self.loglik(x)
        return -ll if math.isfinite(ll) else 1e300


_SCREEN_WIDTH = {"phi": 3.0, "rho": 1.5, "nu": 3.0, "sigma2_eps": 4.0, "sigma2_eta": 4.0, "sigma2_dev": 3.0}


def _starts(space: ParamSpace, init: dict, obj: _Objective, cfg: OptimizerConfig):
    """Best ``cfg.multistart`` points among the heuristic starts and a Sobol screen.

    The screen is a box around the better heuristic start; ties keep the
    heuristic starts first.
    """
    cands = [space.to_internal(init)]
    if "phi" in space.free:
        alt = dict(init)
        alt["phi"] = _phi_guess(obj.series, obj.spec.family, init["rho"])
        cands.append(space.to_internal(alt))
    scored = [(obj.loglik(x), i, x) for i, x in enumerate(cands)]
    obj.evals += len(cands)
    if space.k == 0:
        return [cands[0]], [scored[0][0]]
    center = max(scored, key=lambda r: (r[0], -r[1]))[2]
    sob = stats.qmc.Sobol(space.k, scramble=True, seed=cfg.seed)
    width = np.array([_SCREEN_WIDTH[n] for n in space.free])
    pts = center + (2 * sob.random_base2(int(math.ceil(math.log2(8 * space.k + 8)))) - 1) * width
    scored += [(obj.loglik(x), len(cands) + i, x) for i, x in enumerate(pts)]
    obj.evals += len(pts)
    scored.sort(key=lambda r: (-r[0] if math.isfinite(r[0]) else math.inf, r[1]))
    best = scored[:cfg.multistart]
    return [s[2] for s in best], [s[0] for s in best]


def _phi_guess(series, family, rho0) -> float:
    """phi placing the curve's midpoint where the pooled data cross half range."""
    t, y = _pooled(series)
    ut = np.unique(t)
    ybar = np.array([y[t == s].mean() for s in ut])
    lo, hi = ybar.min(), ybar.max()
    if hi <= lo:
        return 1.0
    level = 1.0 / math.e if family is CurveFamily.GOMPERTZ else 0.5
    u = (ybar - lo) / (hi - lo)
    if ybar[-1] < ybar[0]:
        u = 1.0 - u
    tm = ut[np.argmax(u >= level)] - ut[0]
    return float(min(max(math.exp(rho0 * tm), 1e-3), 1e6))


def _run_one(obj, x0, cfg, budget, loose=False):
    trace = []
    xatol, fatol = (1e-3, max(cfg.tol, 1e-4)) if loose else (1e-5, cfg.tol)
    if cfg.algorithm == "nelder_mead":
        def cb(intermediate_result):
            trace.append(-float(intermediate_result.fun))
        res = optimize.minimize(obj, x0, method="Nelder-Mead", callback=cb,
                                options=dict(maxfev=budget, xatol=xatol, fatol=fatol,
                                             adaptive=x0.size > 3))
        sim = res.final_simplex[0]
        size = float(np.max(np.abs(sim - sim[0])))
    else:
        def cb(intermediate_result):
            trace.append(-float(intermediate_result.fun))
        res = optimize.minimize(obj, x0, method="L-BFGS-B", callback=cb,
                                options=dict(maxfun=budget, ftol=fatol, gtol=1e-6))
        size = float(np.linalg.norm(getattr(res, "jac", np.zeros(1))))
    return res, trace, size


def fit(spec: GrowthModelSpec, data, cfg: Optional[OptimizerConfig] = None, *,
        group=None, fixed: Optional[dict] = None, init: Optional[dict] = None) -> FitResult:
    """Estimate the free parameters of ``spec`` by maximum likelihood.

    Parameters listed in ``fixed`` keep the given values (those not listed
    in ``init`` or ``fixed`` start from :func:`initial_values`). Runs
    ``cfg.multistart`` loose-tolerance optimizations, restarts from the best
    with the full tolerance, then smooths at the winner.
    """
    cfg = cfg or OptimizerConfig()
    series = _as_series(spec, data, group)
    if spec.is_fme:
        fme_labels(spec, series)
    space = ParamSpace.for_spec(spec, fixed)
    start = initial_values(spec.family, series, spec.mode, spec.is_fme)
    if init:
        start.update(init)
    start.update(space.fixed)
    obj = _Objective(spec, space, series, cfg.objective == "marginal")

    starts, start_ll = _starts(space, start, obj, cfg)
    if not any(math.isfinite(v) for v in start_ll):
        raise NumericalError("log-likelihood is not finite at any starting point")

    if space.k == 0:
        best_x, trace, iters, size, converged, msg, restarts = starts[0], [start_ll[0]], 0, 0.0, True, "no free parameters", 0
    else:
        runs = []
        for x0, ll0 in zip(starts, start_ll):
            if not math.isfinite(ll0):
                continue
            res, tr, size = _run_one(obj, x0, cfg, cfg.max_evals, loose=len(starts) > 1)
            runs.append((res, tr, size))
        runs.sort(key=lambda r: r[0].fun)
        res, tr, size = runs[0]
        # one restart from the best optimum guards against simplex collapse
        res2, tr2, size2 = _run_one(obj, res.x, cfg, cfg.max_evals)
        restarts = len(runs)
        if res2.fun <= res.fun:
            trace = tr + [v for v in tr2 if v >= (tr[-1] if tr else -math.inf)]
            res, size = res2, size2
        else:
            trace = tr
        best_x = res.x
        iters = int(res.nit)
        converged = bool(res.success)
        msg = str(res.message)
        lls = [-r[0].fun for r in runs]
        if max(lls) - min(lls) > 1e-4:
            log.info("%s: local optima differ by %.3g in loglik", spec.family.value, max(lls) - min(lls))
        if not converged:
            warnings.warn(f"optimizer did not converge: {msg}", RuntimeWarning, stacklevel=2)

    values = space.to_values(best_x)
    final = space.apply(spec, values)
    model = build(final, series)
    sm = diffuse_smoother(model, series)
    loglik = sm.marginal_loglik if cfg.objective == "marginal" else sm.loglik
    trace = [v for v in trace if math.isfinite(v)]
    if not trace or trace[-1] < loglik:
        trace.append(loglik)
    report = ConvergenceReport(converged, iters, obj.evals, restarts, size, msg,
                               tuple(float(v) for v in trace),
                               tuple(float(v) for v in start_ll))
    mean = extract_component(sm, _selector(model.state_dim, 0), "mean")
    devs = ()
    if final.is_fme:
        labels = fme_labels(final, series)
        devs = tuple(extract_component(sm, _selector(model.state_dim, 2 + i), lab)
                     for i, lab in enumerate(labels))
    cs = None
    if final.mode is Mode.PARAMETRIC:
        cs = recover_constant_scale(sm, final.family, final.curve)
    estimates = {n: values[n] for n in ALL_NAMES if n in values or n in space.free}
    n_used, d = sm.n_used, model.diffuse_count
    return FitResult(final, estimates, space.free, float(loglik), bic_value(loglik, space.k, n_used, d),
                     n_used, d, mean, devs, report, cfg.objective, cs, sm)


def _selector(m, i):
    w = np.zeros(m)
    w[i] = 1.0
    return w


def bic_value(loglik: float, k: int, n_used: int, d: int) -> float:
    if n_used <= d:
        raise ModelError(f"BIC needs more observations ({n_used}) than diffuse dimensions ({d})")
    return -2.0 * loglik + k * math.log(n_used - d)


def bic(f: FitResult) -> float:
    return bic_value(f.loglik, f.k, f.n_used, f.d)


@dataclass(frozen=True)
class Selection:
    """Candidate fits in ascending BIC order; the first one is the winner."""

    ranked: tuple
    failures: tuple = ()

    @property
    def winner(self) -> FitResult:
        return self.ranked[0]


def candidate_specs(families: Sequence, modes: Sequence, deviations="none", K: int = 1,
                    replicate_labels=()) -> list:
    out = []
    for fam in families:
        for mode in modes:
            out.append(GrowthModelSpec(CurveFamily.parse(fam), Mode.parse(mode), _placeholder(fam),
                                       NoiseParams(), K, deviations, tuple(replicate_labels)))
    return out


def _placeholder(fam) -> CurveParams:
    names = CurveFamily.parse(fam).param_names
    return CurveParams(**{n: 1.0 for n in names})


def select_model(candidates: Sequence[GrowthModelSpec], data, cfg: Optional[OptimizerConfig] = None,
                 *, group=None, workers: Optional[int] = None) -> Selection:
    """Fit every candidate (concurrently) and rank by BIC."""
    if not candidates:
        raise ModelError("no candidate models")
    cfg = cfg or OptimizerConfig()

    def one(spec):
        try:
            return fit(spec, data, cfg, group=group), None
        except (NumericalError, ModelError) as exc:
            return None, (spec, str(exc))

    with ThreadPoolExecutor(max_workers=workers or min(len(candidates), 4)) as pool:
        results = list(pool.map(one, candidates))
    fits = [r for r, _ in results if r is not None]
    failures = tuple(e for _, e in results if e is not None)
    if not fits:
        raise NumericalError("every candidate fit failed: " + "; ".join(m for _, m in failures))
    order = sorted(range(len(fits)), key=lambda i: (fits[i].bic, i))
    return Selection(tuple(fits[i] for i in order), failures)
