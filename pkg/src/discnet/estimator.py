"""Scikit-learn style estimators wrapping the fitting and tuning routines."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DataValidationError
from .optimizer import FitControls, FitResult, fit, refit_selected
from .survival import PenaltyConfig, augment_arrays, hazard
from .tuning import TuningGrid, grid_search

__all__ = ["check_survival_target", "DiscreteFrailtyNet", "TunedDiscreteFrailtyNet"]


def check_survival_target(y, n_samples: int, truncation=None):
    """Split ``y`` into ``(time, truncation, event)``.

    ``y`` has columns ``(time, event)`` or ``(time, left, event)``; a
    separate ``truncation`` argument takes precedence over a ``left`` column.
    """
    y = check_array(y, ensure_2d=True, dtype=float)
    if y.shape[0] != n_samples:
        raise DataValidationError(f"y has {y.shape[0]} rows, X has {n_samples}")
    if y.shape[1] == 2:
        time, event = y[:, 0], y[:, 1]
        left = np.ones_like(time)
    elif y.shape[1] == 3:
        time, left, event = y.T
    else:
        raise DataValidationError("y must have columns (time, event) or (time, left, event)")
    if truncation is not None:
        left = np.asarray(truncation, dtype=float)
    return time, left, event


class DiscreteFrailtyNet(BaseEstimator):
    """Elastic-net penalised discrete-time logistic hazard with a random intercept.

    Parameters
    ----------
    nu, alpha : float
        Penalty strength and L1 share of the elastic net.
    nu_baseline : float
        Ridge on the cycle effects.
    groups : sequence of index sequences, optional
        Column groups penalised with the group elastic net.
    t_max : int, optional
        Number of cycles; defaults to the largest observed time.
    frailty : bool
        Include the subject random intercept.
    max_iter, tol : int, float
        Iteration cap and objective tolerance.
    """

    def __init__(self, nu=0.0, alpha=1.0, nu_baseline=100.0, groups=None, t_max=None, frailty=True,
                 max_iter=5000, tol=1e-8):
        self.nu = nu
        self.alpha = alpha
        self.nu_baseline = nu_baseline
        self.groups = groups
        self.t_max = t_max
        self.frailty = frailty
        self.max_iter = max_iter
        self.tol = tol

    def _controls(self):
        return FitControls(tol_objective=self.tol, max_iter=self.max_iter)

    def _design(self, X, y, truncation):
        X = check_array(X, dtype=float)
        time, left, event = check_survival_target(y, X.shape[0], truncation)
        t_max = self.t_max if self.t_max is not None else int(time.max())
        Z = None
        if not self.frailty:
            Z = np.zeros((int(np.sum(time - left + 1)), 0))
        return X, augment_arrays(X, time, left, event, t_max, Z)

    def _store(self, result: FitResult, design):
        p = result.params
        self.result_ = result
        self.coef_ = p.coefficients.copy()
        self.intercept_ = float(p.intercept)
        self.baseline_ = p.baseline.copy()
        self.frailty_cov_ = p.frailty_cov.copy()
        self.random_effects_ = p.random_effects.copy()
        self.selected_ = np.flatnonzero(self.coef_)
        self.converged_ = result.converged
        self.n_iter_ = result.iterations
        self.n_features_in_ = design.n_features
        self.t_max_ = design.t_max
        return self

    def fit(self, X, y, truncation=None):
        X, design = self._design(X, y, truncation)
        penalty = PenaltyConfig(self.nu, self.alpha, self.nu_baseline, self.groups)
        return self._store(fit(design, penalty, controls=self._controls()), design)

    def decision_function(self, X):
        """Linear predictor ``x' beta`` (log-odds shift of every cycle's hazard)."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_

    predict = decision_function

    def predict_hazard(self, X):
        """Cycle hazards ``(n, t_max)`` for a subject with zero frailty."""
        eta = self.intercept_ + self.decision_function(X)[:, None] + self.baseline_[None, :]
        return hazard(eta)

    def predict_survival(self, X):
        """``P(T > t)`` for ``t = 1..t_max`` at zero frailty."""
        return np.cumprod(1.0 - self.predict_hazard(X), axis=1)


class TunedDiscreteFrailtyNet(DiscreteFrailtyNet):
    """Permutation-chosen ``nu`` within a BIC grid over ``(alpha, nu_baseline)``.

    With ``refit=True`` the selected covariates are refitted without the
    elastic net and ``covariance_`` holds the inverse Fisher block over
    ``(intercept, selected, baseline)``.
    """

    def __init__(self, alphas=TuningGrid.alphas, nu_baselines=TuningGrid.nu_baselines, permutations=20,
                 quantile=0.95, seed=0, groups=None, t_max=None, frailty=True, refit=False,
                 max_iter=5000, tol=1e-8):
        self.alphas = alphas
        self.nu_baselines = nu_baselines
        self.permutations = permutations
        self.quantile = quantile
        self.seed = seed
        self.refit = refit
        super().__init__(groups=groups, t_max=t_max, frailty=frailty, max_iter=max_iter, tol=tol)

    def fit(self, X, y, truncation=None):
        X, design = self._design(X, y, truncation)
        grid = TuningGrid(tuple(self.alphas), tuple(self.nu_baselines), self.permutations, self.seed,
                          self.quantile)
        search = grid_search(design, grid, self._controls(), groups=self.groups)
        if search.best is None:
            raise DataValidationError("no grid cell converged")
        best = search.best
        self.search_ = search
        self.best_alpha_ = best.alpha
        self.best_nu_ = best.nu
        self.best_nu_baseline_ = best.nu_baseline
        self.penalized_result_ = best.result
        result = best.result
        if self.refit:
            result = refit_selected(design, best.result.selected, best.nu_baseline, self._controls(),
                                    init=best.result.params)
            self.covariance_ = result.covariance
            self.covariance_index_ = result.covariance_index
        self._store(result, design)
        self.selected_ = np.asarray(best.result.selected)
        return self
