"""Shared simulation setups for the tests."""

import numpy as np

from growthssm.curves import CurveParams, eval_g
from growthssm.models import GrowthModelSpec, NoiseParams, build
from growthssm.ssm import Dataset, Record, simulate

GRID = np.arange(47) * 0.5  # 0 .. 23 h every 30 min
K12 = tuple(str(i + 1) for i in range(12))

# truth used for the mixed-effects recovery study
GOMPERTZ_TRUTH = dict(phi=20.91, rho=0.46, sigma2_eta=102.03, sigma2_dev=0.034, sigma2_eps=0.00014)
# parametric Richards truth for the collapse study
RICHARDS_TRUTH = dict(phi=71.69, rho=0.674, nu=0.445, sigma2_dev=0.019, sigma2_eps=0.00004)
CONSTANT, SCALE = 0.003, 9.58


def template(times=GRID, labels=K12, group="g"):
    return Dataset(tuple(Record(group, lab, float(t), 0.0) for t in times for lab in labels)).series()


def initial_state(family, curve, m, constant=CONSTANT, scale=SCALE):
    a0 = np.zeros(m)
    a0[1] = scale
    a0[0] = constant + scale * eval_g(family, curve, 0.0)
    return a0


def gompertz_fme_model(series=None):
    series = series or template()
    t = GOMPERTZ_TRUTH
    curve = CurveParams(t["phi"], t["rho"])
    spec = GrowthModelSpec("gompertz", "semiparametric", curve,
                           NoiseParams(t["sigma2_eps"], t["sigma2_eta"], t["sigma2_dev"]), 12, "random_walk", K12)
    return spec, build(spec, series), series, initial_state("gompertz", curve, 14)


def richards_fme_model(series=None):
    series = series or template()
    t = RICHARDS_TRUTH
    curve = CurveParams(t["phi"], t["rho"], t["nu"])
    spec = GrowthModelSpec("richards", "parametric", curve,
                           NoiseParams(t["sigma2_eps"], 0.0, t["sigma2_dev"]), 12, "random_walk", K12)
    return spec, build(spec, series), series, initial_state("richards", curve, 14)


def simulate_truth(which, seed, return_states=False):
    _, model, series, a0 = (gompertz_fme_model if which == "gompertz" else richards_fme_model)()
    return simulate(model, seed, series, initial_state=a0, return_states=return_states)


def logistic_dataset(seed, constant=3.605, scale=1.844, phi=1.398, rho=0.104, sigma2_eps=3e-4, n=46,
                     group="g"):
    """Annual single-series logistic data ``constant + scale / (1 + phi exp(-rho t))`` plus noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=float)
    f = constant + scale / (1.0 + phi * np.exp(-rho * t))
    y = f + rng.normal(0.0, np.sqrt(sigma2_eps), n)
    return Dataset(tuple(Record(group, "1", float(a), float(b)) for a, b in zip(t, y))), f
