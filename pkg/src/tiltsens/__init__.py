"""Exponential-tilt sensitivity analysis for unmeasured confounding."""

from .dataset import Dataset, ObservationRecord, SplitPlan, empirical_summary, load_csv, make_folds, write_csv
from .estimator import (
    EstimateReport,
    EstimatorOptions,
    NuisanceBundle,
    crossfit_estimate,
    eif,
    fit_nuisances,
    huber_threshold,
    induced_mean,
    onestep,
    psi_plugin,
    remainder,
    sensitivity_grid,
    variance_psi,
)
from .outcome_cdf import OutcomeFit, SingleIndexSettings, fit_single_index
from .propensity import PropensityFit, PropensitySettings, fit_propensity, predict_pi
from .tilting import Identity, SmoothCapAbove, SmoothRampAbove, TiltSpec, UserTable, eval_tilt, exp_tilt

__version__ = "0.1.0"
