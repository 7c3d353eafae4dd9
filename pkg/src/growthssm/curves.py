"""Growth/decay curve families g(theta, t) and their two-state recursion.

A curve ``f(t) = constant + scale * g(t)`` propagates exactly as
``[f(t+h), scale] = T [f(t), scale]`` with ``T = [[1, g(t+h) - g(t)], [0, 1]]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ssm import ModelError

NU_BOUNDS = (1e-3, 1e3)


class CurveFamily(enum.Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"
    LOGISTIC = "logistic"
    GOMPERTZ = "gompertz"
    RICHARDS = "richards"

    @property
    def param_names(self) -> tuple:
        return _PARAMS[self]

    @property
    def arity(self) -> int:
        return len(_PARAMS[self])

    @classmethod
    def parse(cls, name) -> "CurveFamily":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            known = ", ".join(f.value for f in cls)
            raise ModelError(f"unknown curve family {name!r} (known: {known})") from None


_PARAMS = {
    CurveFamily.LINEAR: (),
    CurveFamily.EXPONENTIAL: ("rho",),
    CurveFamily.LOGISTIC: ("phi", "rho"),
    CurveFamily.GOMPERTZ: ("phi", "rho"),
    CurveFamily.RICHARDS: ("phi", "rho", "nu"),
}


@dataclass(frozen=True)
class CurveParams:
    phi: Optional[float] = None
    rho: Optional[float] = None
    nu: Optional[float] = None

    def check(self, family: CurveFamily) -> "CurveParams":
        """Raise unless exactly the family's parameters are present and positive."""
        family = CurveFamily.parse(family)
        for name in ("phi", "rho", "nu"):
            val = getattr(self, name)
            if name in family.param_names:
                if val is None or not np.isfinite(val) or val <= 0:
                    raise ModelError(f"{family.value}: parameter {name} must be a positive number, got {val}")
            elif val is not None:
                raise ModelError(f"{family.value} takes no parameter {name}")
        return self

    def as_dict(self) -> dict:
        return {k: v for k, v in (("phi", self.phi), ("rho", self.rho), ("nu", self.nu)) if v is not None}


def eval_g(family, params: CurveParams, t):
    """g(theta, t) for scalar or array ``t``.

    Logistic, Gompertz and Richards are evaluated on the log scale so large
    ``phi`` or ``rho * t`` do not overflow before the final exponential.
    """
    family = CurveFamily.parse(family)
    params.check(family)
    tt = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        if family is CurveFamily.LINEAR:
            g = tt.copy()
        elif family is CurveFamily.EXPONENTIAL:
            g = np.exp(-params.rho * tt)
        else:
            u = np.log(params.phi) - params.rho * tt
            if family is CurveFamily.LOGISTIC:
                g = np.exp(-np.logaddexp(0.0, u))
            elif family is CurveFamily.GOMPERTZ:
                g = np.exp(-np.exp(u))
            else:
                g = np.exp(-np.logaddexp(0.0, u) / params.nu)
    bad = ~np.isfinite(g)
    if np.any(bad):
        where = float(np.atleast_1d(tt)[np.flatnonzero(np.atleast_1d(bad))[0]])
        raise ModelError(f"{family.value}: g is not finite at t={where:g}")
    return float(g) if np.ndim(g) == 0 else g


def increments(family, params: CurveParams, times) -> np.ndarray:
    """g(t[j+1]) - g(t[j]) along a sorted time vector."""
    g = np.atleast_1d(eval_g(family, params, np.asarray(times, dtype=float)))
    return np.diff(g)


def transition(family, params: CurveParams, t: float, t_next: float) -> np.ndarray:
    if t_next < t:
        raise ModelError(f"transition needs t_next >= t, got {t} -> {t_next}")
    dg = eval_g(family, params, t_next) - eval_g(family, params, t)
    return np.array([[1.0, dg], [0.0, 1.0]])


def noise_block(sigma2_eta: float, delta) -> np.ndarray:
    """sigma2_eta * [[D^3/3, D^2/2], [D^2/2, D]] for one or many ``delta``."""
    d = np.abs(np.asarray(delta, dtype=float))
    out = np.empty(d.shape + (2, 2))
    out[..., 0, 0] = d ** 3 / 3.0
    out[..., 0, 1] = out[..., 1, 0] = d ** 2 / 2.0
    out[..., 1, 1] = d
    return sigma2_eta * out


def process_noise(family, params: CurveParams, sigma2_eta: float, t: float, t_next: float) -> np.ndarray:
    if sigma2_eta < 0:
        raise ModelError("sigma2_eta must be non-negative")
    dg = eval_g(family, params, t_next) - eval_g(family, params, t)
    return noise_block(sigma2_eta, dg)
