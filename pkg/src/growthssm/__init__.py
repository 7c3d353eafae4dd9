"""Growth curves as linear Gaussian state space models.

Parametric, semiparametric and functional mixed-effects growth curves are
cast as state space models with an exact diffuse start, fitted by maximum
marginal likelihood and compared by BIC.
"""

from .analysis import Band, Difference, RateSummary, confidence_band, curve_difference, deviation_curves, growth_rate
from .curves import CurveFamily, CurveParams, eval_g, increments, noise_block, process_noise, transition
from .estimation import (ConvergenceReport, FitResult, OptimizerConfig, ParamSpace, Selection, bic, bic_value,
                         candidate_specs, fit, initial_values, select_model)
from .io import augment_grid, read_artifact, read_long_csv, write_artifact, write_long_csv
from .kalman import (ComponentSeries, FilterResult, SmootherResult, diffuse_filter, diffuse_smoother,
                     extract_component, likelihood)
from .models import (Deviations, GrowthModelSpec, Mode, NoiseParams, build, build_fme, build_parametric,
                     build_semiparametric, recover_constant_scale)
from .ssm import (Dataset, ModelError, NumericalError, ObservationSeries, Record, StateSpaceModel, TimeGrid,
                  simulate, validate_model)

__version__ = "0.1.0"
