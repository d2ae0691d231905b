"""Penalized discrete-time frailty survival models."""
from .exceptions import DataValidationError, NumericalError
from .survival import (
    AugmentedDesign,
    ModelParameters,
    PenaltyConfig,
    SurvivalObservation,
    augment,
    augment_arrays,
    hazard,
    log_likelihood,
    penalized_objective,
    survivor,
)
from .optimizer import FitControls, FitResult, fit, refit_selected
from .tuning import TuningGrid, bic, grid_search, permutation_select_nu

__version__ = "0.1.0"
from .estimator import DiscreteFrailtyNet, TunedDiscreteFrailtyNet
