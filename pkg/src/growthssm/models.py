"""State space builders for parametric, semiparametric and mixed-effects growth curves."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .curves import CurveFamily, CurveParams, eval_g, increments, noise_block
from .kalman import SmootherResult
from .ssm import ModelError, ObservationSeries, StateSpaceModel


class Mode(enum.Enum):
    PARAMETRIC = "parametric"
    SEMIPARAMETRIC = "semiparametric"

    @classmethod
    def parse(cls, v) -> "Mode":
        if isinstance(v, cls):
            return v
        try:
            return cls(str(v).strip().lower())
        except ValueError:
            raise ModelError(f"unknown mode {v!r} (parametric or semiparametric)") from None


class Deviations(enum.Enum):
    NONE = "none"
    RANDOM_WALK = "random_walk"

    @classmethod
    def parse(cls, v) -> "Deviations":
        if isinstance(v, cls):
            return v
        key = str(v).strip().lower().replace("-", "_")
        if key in ("rw", "randomwalk"):
            key = "random_walk"
        try:
            return cls(key)
        except ValueError:
            raise ModelError(f"unknown deviation type {v!r} (none or random_walk)") from None


@dataclass(frozen=True)
class NoiseParams:
    sigma2_eps: float = 0.0
    sigma2_eta: float = 0.0
    sigma2_dev: float = 0.0

    def __post_init__(self):
        for name in ("sigma2_eps", "sigma2_eta", "sigma2_dev"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ModelError(f"{name} must be a finite non-negative number, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class GrowthModelSpec:
    """Everything needed to build the SSM for one group of replicate curves.

    ``replicate_labels`` may be left empty, in which case the labels found in
    the data are used (their count must still equal ``K``).
    """

    family: CurveFamily
    mode: Mode = Mode.PARAMETRIC
    curve: CurveParams = field(default_factory=CurveParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    K: int = 1
    deviations: Deviations = Deviations.NONE
    replicate_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "family", CurveFamily.parse(self.family))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        object.__setattr__(self, "deviations", Deviations.parse(self.deviations))
        object.__setattr__(self, "replicate_labels", tuple(str(x) for x in self.replicate_labels))
        self.curve.check(self.family)
        if int(self.K) != self.K or self.K < 1:
            raise ModelError(f"K must be a positive integer, got {self.K}")
        if self.replicate_labels and len(self.replicate_labels) != self.K:
            raise ModelError(f"{len(self.replicate_labels)} replicate labels given for K={self.K}")
        if self.deviations is Deviations.RANDOM_WALK and self.K < 2:
            warnings.warn("random-walk deviations with a single replicate are not identifiable",
                          stacklevel=2)

    @property
    def sigma2_eta(self) -> float:
        return 0.0 if self.mode is Mode.PARAMETRIC else self.noise.sigma2_eta

    @property
    def is_fme(self) -> bool:
        return self.deviations is Deviations.RANDOM_WALK

    def with_params(self, curve: CurveParams = None, noise: NoiseParams = None) -> "GrowthModelSpec":
        return replace(self, curve=curve or self.curve, noise=noise or self.noise)


def _curve_arrays(family, params, sigma2_eta, times):
    dg = increments(family, params, times)
    n1 = dg.size
    T = np.zeros((n1, 2, 2))
    T[:, 0, 0] = T[:, 1, 1] = 1.0
    T[:, 0, 1] = dg
    return T, noise_block(sigma2_eta, dg)


def _curve_model(family, params, noise, series, sigma2_eta):
    family = CurveFamily.parse(family)
    params.check(family)
    T, Q = _curve_arrays(family, params, sigma2_eta, series.times)
    n = series.n_entries
    Z = np.zeros((n, 2))
    Z[:, 0] = 1.0
    return StateSpaceModel(
        times=series.times, obs_steps=series.steps, Z=Z, H=np.full(n, noise.sigma2_eps),
        T=T, Q=Q, init_mean=np.zeros(2), init_cov=np.zeros((2, 2)), diffuse_indices=(0, 1),
        X=series.regressors, labels=("f", "scale"))


def build_parametric(family, params: CurveParams, noise: NoiseParams,
                     series: ObservationSeries) -> StateSpaceModel:
    """State ``[f(t), scale]`` with a diffuse start and no state noise."""
    if series.n_entries == 0:
        raise ModelError("series has no entries")
    return _curve_model(family, params, noise, series, 0.0)


def build_semiparametric(family, params: CurveParams, noise: NoiseParams,
                         series: ObservationSeries) -> StateSpaceModel:
    """As :func:`build_parametric` with state noise scaled by ``sigma2_eta``."""
    if series.n_entries == 0:
        raise ModelError("series has no entries")
    return _curve_model(family, params, noise, series, noise.sigma2_eta)


def fme_labels(spec: GrowthModelSpec, series: ObservationSeries) -> tuple:
    labels = spec.replicate_labels or series.replicate_labels
    unknown = sorted(set(series.replicates) - set(labels))
    if unknown:
        raise ModelError(f"replicate labels {unknown} in the data are not declared in the model")
    if len(labels) != spec.K:
        raise ModelError(f"model declares K={spec.K} replicates but {len(labels)} labels are in use")
    return tuple(labels)


def system_arrays(spec: GrowthModelSpec, series: ObservationSeries):
    """``(T, Q, H)`` of the model :func:`build` would return, without validation."""
    sigma2_eta = spec.sigma2_eta
    Tc, Qc = _curve_arrays(spec.family, spec.curve, sigma2_eta, series.times)
    H = np.full(series.n_entries, spec.noise.sigma2_eps)
    if not spec.is_fme:
        return Tc, Qc, H
    m = 2 + spec.K
    h = series.grid.gaps
    n1 = h.size
    T = np.zeros((n1, m, m))
    Q = np.zeros((n1, m, m))
    T[:, :2, :2] = Tc
    Q[:, :2, :2] = Qc
    idx = np.arange(2, m)
    T[:, idx, idx] = 1.0
    Q[:, idx, idx] = spec.noise.sigma2_dev * h[:, None]
    return T, Q, H


def build_fme(spec: GrowthModelSpec, series: ObservationSeries) -> StateSpaceModel:
    """Mean curve plus one random-walk deviation per replicate.

    State ``[f, scale, w_1 .. w_K]``; the deviations start pinned at zero and
    gain variance ``sigma2_dev * h`` per gap ``h``.
    """
    if series.n_entries == 0:
        raise ModelError("series has no entries")
    labels = fme_labels(spec, series)
    K = spec.K
    m = 2 + K
    T, Q, _ = system_arrays(spec, series)
    rank = {lab: i for i, lab in enumerate(labels)}
    n = series.n_entries
    Z = np.zeros((n, m))
    Z[:, 0] = 1.0
    Z[np.arange(n), [2 + rank[r] for r in series.replicates]] = 1.0
    return StateSpaceModel(
        times=series.times, obs_steps=series.steps, Z=Z, H=np.full(n, spec.noise.sigma2_eps),
        T=T, Q=Q, init_mean=np.zeros(m), init_cov=np.zeros((m, m)), diffuse_indices=(0, 1),
        X=series.regressors, labels=("f", "scale") + tuple(f"dev:{lab}" for lab in labels))


def build(spec: GrowthModelSpec, series: ObservationSeries) -> StateSpaceModel:
    if spec.is_fme:
        return build_fme(spec, series)
    if spec.mode is Mode.PARAMETRIC:
        return build_parametric(spec.family, spec.curve, spec.noise, series)
    return build_semiparametric(spec.family, spec.curve, spec.noise, series)


def recover_constant_scale(s: SmootherResult, family, params: CurveParams,
                           mode=Mode.PARAMETRIC) -> tuple[float, float]:
    """``(constant, scale)`` of ``f = constant + scale * g`` from a parametric smooth.

    The state carries ``scale`` unchanged, so it is read at the first time and
    the constant follows from ``f`` there.
    """
    if Mode.parse(mode) is not Mode.PARAMETRIC:
        raise ModelError("constant and scale are only defined for a parametric fit")
    t0 = s.times[0] - s.origin
    scale = float(s.mean[0, 1])
    constant = float(s.mean[0, 0] - scale * eval_g(family, params, t0))
    return constant, scale
