"""Linear-Gaussian state space models for longitudinal data.

The observation at step ``j`` for entry ``i`` is::

    y[j, i] = Z[j, i] @ alpha[j] + X[j, i] @ beta + eps,   eps ~ N(0, H[j, i])
    alpha[j + 1] = T[j] @ alpha[j] + eta,                 eta ~ N(0, Q[j])

with a partially diffuse ``alpha[0]`` and diffuse ``beta``. Steps are the
distinct time stamps of one group; the gaps between them may differ and the
number of responses per step may vary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Inconsistent model or data definition."""


class NumericalError(ArithmeticError):
    """A filter or smoother recursion broke down."""


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).copy()
        if times.ndim != 1 or times.size == 0:
            raise ModelError("time grid must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(times)):
            raise ModelError("time grid contains non-finite values")
        if np.any(np.diff(times) <= 0):
            raise ModelError("time grid must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return self.times.size

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass(frozen=True)
class Record:
    group: str
    replicate: str
    time: float
    value: Optional[float] = None

    @property
    def missing(self) -> bool:
        return self.value is None


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def sort_labels(labels: Iterable[str]) -> list[str]:
    """Sort labels numerically when they look like numbers, else lexically."""
    return sorted(set(labels), key=_label_key)


@dataclass(frozen=True)
class Dataset:
    """Long-format longitudinal records; a missing value means "predict here"."""

    records: tuple[Record, ...]

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for rec in records:
            if not math.isfinite(rec.time):
                raise ModelError(f"non-finite time in record {rec}")
            if rec.value is not None and not math.isfinite(rec.value):
                raise ModelError(f"non-finite value in record {rec}")
            key = (rec.group, rec.replicate, rec.time)
            if key in seen:
                raise ModelError(f"duplicate record for group={rec.group!r} "
                                 f"replicate={rec.replicate!r} time={rec.time!r}")
            seen.add(key)
        object.__setattr__(self, "records", records)

    def __len__(self):
        return len(self.records)

    @property
    def groups(self) -> list[str]:
        return sort_labels(r.group for r in self.records)

    def replicates(self, group: Optional[str] = None) -> list[str]:
        return sort_labels(r.replicate for r in self.records
                           if group is None or r.group == group)

    def subset(self, group: str) -> "Dataset":
        return Dataset(tuple(r for r in self.records if r.group == group))

    @property
    def n_observed(self) -> int:
        return sum(not r.missing for r in self.records)

    def series(self, group: Optional[str] = None,
               replicates: Optional[Sequence[str]] = None,
               origin: Optional[float] = None) -> "ObservationSeries":
        """Arrange one group's records by time step.

        Times are shifted so the first record of the group sits at 0 unless an
        explicit ``origin`` is given.
        """
        groups = self.groups
        if group is None:
            if len(groups) != 1:
                raise ModelError(f"dataset holds {len(groups)} groups; name one of {groups}")
            group = groups[0]
        recs = [r for r in self.records if r.group == group]
        if not recs:
            raise ModelError(f"no records for group {group!r}")
        labels = list(replicates) if replicates is not None else sort_labels(r.replicate for r in recs)
        unknown = {r.replicate for r in recs} - set(labels)
        if unknown:
            raise ModelError(f"replicate labels {sorted(unknown)} not declared for group {group!r}")
        rank = {lab: i for i, lab in enumerate(labels)}
        if origin is None:
            origin = min(r.time for r in recs)
        times = np.array(sorted({r.time for r in recs}), dtype=float)
        step_of = {t: j for j, t in enumerate(times)}
        recs.sort(key=lambda r: (step_of[r.time], rank[r.replicate]))
        return ObservationSeries(
            grid=TimeGrid(times - origin),
            steps=np.array([step_of[r.time] for r in recs], dtype=np.int64),
            replicates=tuple(r.replicate for r in recs),
            values=np.array([np.nan if r.value is None else r.value for r in recs]),
            replicate_labels=tuple(labels),
            group=group,
            origin=float(origin),
        )


@dataclass(frozen=True)
class ObservationSeries:
    """Responses of one group, flattened in (step, replicate) order.

    ``values`` uses NaN for missing responses. ``regressors`` optionally holds
    one row of the regression design per entry.
    """

    grid: TimeGrid
    steps: np.ndarray
    replicates: tuple[str, ...]
    values: np.ndarray
    replicate_labels: tuple[str, ...] = ()
    regressors: Optional[np.ndarray] = None
    group: str = "1"
    origin: float = 0.0

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if steps.shape != values.shape or len(self.replicates) != steps.size:
            raise ModelError("steps, replicates and values must have equal length")
        if steps.size and (np.any(np.diff(steps) < 0) or steps[0] < 0 or steps[-1] >= len(self.grid)):
            raise ModelError("entries must be ordered by step and lie on the grid")
        if not self.replicate_labels:
            object.__setattr__(self, "replicate_labels", tuple(sort_labels(self.replicates)))
        if self.regressors is not None:
            X = np.atleast_2d(np.asarray(self.regressors, dtype=float))
            if X.shape[0] != steps.size:
                raise ModelError("regressor rows must match the number of entries")
            object.__setattr__(self, "regressors", X)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "values", values)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def n_steps(self) -> int:
        return len(self.grid)

    @property
    def n_entries(self) -> int:
        return self.steps.size

    @property
    def n_observed(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.values)))

    @property
    def replicate_index(self) -> np.ndarray:
        rank = {lab: i for i, lab in enumerate(self.replicate_labels)}
        return np.array([rank[r] for r in self.replicates], dtype=np.int64)

    def step_slice(self, j: int) -> slice:
        lo, hi = np.searchsorted(self.steps, [j, j + 1])
        return slice(int(lo), int(hi))

    def with_values(self, values) -> "ObservationSeries":
        return ObservationSeries(self.grid, self.steps, self.replicates, np.asarray(values, float),
                                 self.replicate_labels, self.regressors, self.group, self.origin)

    def to_dataset(self, values=None) -> Dataset:
        vals = self.values if values is None else np.asarray(values, float)
        t = self.times + self.origin
        return Dataset(tuple(
            Record(self.group, rep, float(t[j]), None if np.isnan(v) else float(v))
            for j, rep, v in zip(self.steps, self.replicates, vals)))


@dataclass(frozen=True)
class StateSpaceModel:
    """System matrices of a time-varying SSM laid out per step.

    ``T[j]`` and ``Q[j]`` carry the state from step ``j`` to ``j + 1``.
    Observation rows ``Z``, ``X`` and variances ``H`` follow the entry order
    of the series the model was built for; ``obs_steps`` maps entries to steps.
    Entries of ``init_mean``/``init_cov`` at diffuse positions are ignored.
    """

    times: np.ndarray
    obs_steps: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    T: np.ndarray
    Q: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    diffuse_indices: tuple[int, ...]
    X: Optional[np.ndarray] = None
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for name in ("times", "Z", "H", "T", "Q", "init_mean", "init_cov", "X"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        steps = np.array(self.obs_steps, dtype=np.int64)
        steps.setflags(write=False)
        object.__setattr__(self, "obs_steps", steps)
        object.__setattr__(self, "diffuse_indices", tuple(int(i) for i in self.diffuse_indices))

    @property
    def state_dim(self) -> int:
        return self.init_mean.size

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def n_regressors(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    @property
    def diffuse_count(self) -> int:
        return len(self.diffuse_indices) + self.n_regressors

    def observation(self, j: int):
        """Return ``(Z_j, X_j, H_j)`` for the entries observed at step ``j``."""
        sel = self.obs_steps == j
        X = None if self.X is None else self.X[sel]
        return self.Z[sel], X, self.H[sel]

    def transition(self, j: int):
        """Return ``(T, Q)`` moving the state from step ``j`` to ``j + 1``."""
        return self.T[j], self.Q[j]

    def augmented(self):
        """Arrays with ``beta`` appended to the state as diffuse constants.

        Returns ``(a0, P0_star, P0_inf, T, Q, Z)`` where the regression
        coefficients follow an identity transition without noise.
        """
        m, k = self.state_dim, self.n_regressors
        ma = m + k
        n = self.n_steps
        a0 = np.zeros(ma)
        a0[:m] = self.init_mean
        P0s = np.zeros((ma, ma))
        P0s[:m, :m] = self.init_cov
        P0i = np.zeros((ma, ma))
        for i in self.diffuse_indices:
            a0[i] = 0.0
            P0s[i, :] = 0.0
            P0s[:, i] = 0.0
            P0i[i, i] = 1.0
        for i in range(m, ma):
            P0i[i, i] = 1.0
        if k == 0:
            T = np.ascontiguousarray(self.T)
            Q = np.ascontiguousarray(self.Q)
            Z = np.ascontiguousarray(self.Z)
        else:
            T = np.zeros((max(n - 1, 0), ma, ma))
            T[:, :m, :m] = self.T
            T[:, m:, m:] = np.eye(k)
            Q = np.zeros((max(n - 1, 0), ma, ma))
            Q[:, :m, :m] = self.Q
            Z = np.hstack([self.Z, self.X])
        return a0, P0s, P0i, T, Q, Z


@dataclass(frozen=True)
class ValidationReport:
    state_dim: int
    diffuse_count: int
    n_steps: int
    n_entries: int
    n_observed: int

    def __str__(self):
        return (f"OK: m={self.state_dim}, d={self.diffuse_count}, steps={self.n_steps}, "
                f"entries={self.n_entries} ({self.n_observed} observed)")


def psd_min_pivot(A: np.ndarray, tol: float = -1e-12) -> float:
    """Smallest pivot of a semi-definite Cholesky factorisation of ``A``.

    Pivots in ``[tol, 0]`` count as zero and their column is skipped. Returns
    ``-inf`` as soon as a pivot falls below ``tol``.
    """
    L = np.array(A, dtype=float)
    n = L.shape[0]
    smallest = math.inf
    for k in range(n):
        piv = L[k, k]
        smallest = min(smallest, piv)
        if piv < tol:
            return -math.inf
        if piv <= 0.0:
            if np.any(np.abs(L[k + 1:, k]) > 1e-9 * max(1.0, np.abs(L).max())):
                return -math.inf
            continue
        L[k:, k] /= math.sqrt(piv)
        L[k + 1:, k + 1:] -= np.outer(L[k + 1:, k], L[k + 1:, k])
    return smallest


def _check_psd(A, what):
    scale = max(1.0, float(np.abs(A).max())) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * scale):
        raise ModelError(f"non-symmetric {what}")
    if A.size and psd_min_pivot(A / scale) == -math.inf:
        raise ModelError(f"{what} is not positive semi-definite "
                         f"(min eigenvalue {np.linalg.eigvalsh(A).min():.3g})")


def validate_model(model: StateSpaceModel, series: ObservationSeries) -> ValidationReport:
    """Check dimensions, symmetry and semi-definiteness of every system matrix."""
    m, n = model.state_dim, model.n_steps
    if model.init_cov.shape != (m, m):
        raise ModelError(f"initial covariance has shape {model.init_cov.shape}, expected {(m, m)}")
    if any(i < 0 or i >= m for i in model.diffuse_indices):
        raise ModelError(f"diffuse indices {model.diffuse_indices} outside 0..{m - 1}")
    if n != series.n_steps or not np.array_equal(model.times, series.times):
        raise ModelError("model and series disagree on the time grid")
    if model.obs_steps.shape != series.steps.shape or np.any(model.obs_steps != series.steps):
        raise ModelError("model and series disagree on entry layout")
    nobs = series.n_entries
    if model.Z.shape != (nobs, m):
        bad = 0 if model.Z.ndim != 2 or model.Z.shape[0] == 0 else int(series.steps[min(nobs, model.Z.shape[0]) - 1])
        raise ModelError(f"observation matrix has shape {model.Z.shape}, expected {(nobs, m)} (step {bad})")
    if model.H.shape != (nobs,):
        raise ModelError(f"observation variances have shape {model.H.shape}, expected {(nobs,)}")
    neg = np.flatnonzero(model.H < 0)
    if neg.size:
        raise ModelError(f"negative observation variance at step {int(series.steps[neg[0]])}")
    if model.X is not None:
        if model.X.shape[0] != nobs:
            raise ModelError("regression design rows do not match entries")
        if series.regressors is None or series.regressors.shape != model.X.shape:
            raise ModelError("series regressors do not match the model design")
    for name, arr in (("T", model.T), ("Q", model.Q)):
        if arr.shape != (max(n - 1, 0), m, m):
            raise ModelError(f"{name} has shape {arr.shape}, expected {(max(n - 1, 0), m, m)}")
    _check_psd(model.init_cov, "initial covariance")
    for j in range(n - 1):
        Q = model.Q[j]
        scale = max(1.0, float(np.abs(Q).max()))
        if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * scale):
            raise ModelError(f"non-symmetric Q at step {j}")
        if psd_min_pivot(Q / scale) == -math.inf:
            raise ModelError(f"Q at step {j} is not positive semi-definite "
                             f"(min eigenvalue {np.linalg.eigvalsh(Q).min():.3g})")
    return ValidationReport(m, model.diffuse_count, n, nobs, series.n_observed)


def _gaussian_draw(rng: np.random.Generator, cov: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(cov)
    z = rng.standard_normal(w.size)
    return U @ (np.sqrt(np.clip(w, 0.0, None)) * z)


def simulate(model: StateSpaceModel, seed: int, template: ObservationSeries,
             initial_state=None, beta=None, return_states: bool = False):
    """Draw one data set from ``model`` on the layout of ``template``.

    Diffuse elements cannot be sampled, so ``initial_state`` must supply
    their values (other entries of it are ignored; non-diffuse elements are
    drawn from ``init_mean``/``init_cov``). Every template entry, missing or
    not, receives a simulated value.
    """
    m, k = model.state_dim, model.n_regressors
    if model.diffuse_indices and initial_state is None:
        raise ModelError("simulation needs concrete values for the diffuse initial states "
                         f"{model.diffuse_indices}")
    if k and beta is None:
        raise ModelError("simulation needs values for the regression coefficients")
    rng = np.random.default_rng(seed)
    alpha = model.init_mean + _gaussian_draw(rng, model.init_cov)
    if model.diffuse_indices:
        init = np.asarray(initial_state, dtype=float)
        if init.shape != (m,):
            raise ModelError(f"initial_state must have length {m}")
        idx = list(model.diffuse_indices)
        alpha[idx] = init[idx]
    beta = np.zeros(0) if beta is None else np.asarray(beta, dtype=float)
    states = np.empty((model.n_steps, m))
    values = np.empty(template.n_entries)
    for j in range(model.n_steps):
        if j > 0:
            T, Q = model.transition(j - 1)
            alpha = T @ alpha + _gaussian_draw(rng, Q)
        states[j] = alpha
        sl = template.step_slice(j)
        Z, X, H = model.observation(j)
        mean = Z @ alpha
        if X is not None:
            mean = mean + X @ beta
        values[sl] = mean + np.sqrt(H) * rng.standard_normal(H.size)
    data = template.to_dataset(values)
    return (data, states) if return_states else data
