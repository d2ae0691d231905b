"""Penalty tuning: permutation choice of ``nu`` inside a BIC grid over ``(alpha, nu_s)``."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataValidationError
from .optimizer import FitControls, FitResult, _Model, fit
from .survival import AugmentedDesign, PenaltyConfig, hazard

logger = logging.getLogger(__name__)

__all__ = [
    "TuningGrid",
    "NullEntry",
    "null_entry",
    "permutation_select_nu",
    "bic",
    "grid_search",
    "GridCell",
]


@dataclass(frozen=True)
class TuningGrid:
    alphas: tuple = (1.0, 0.95, 0.8, 0.7, 0.6, 0.5)
    nu_baselines: tuple = (15.0, 25.0, 50.0, 100.0)
    permutations: int = 20
    seed: int = 0
    quantile: float = 0.95

    def __post_init__(self):
        if not self.alphas or not self.nu_baselines:
            raise DataValidationError("tuning grid must be nonempty")
        if any(not (0 < a <= 1) for a in self.alphas):
            raise DataValidationError("grid alphas must lie in (0, 1]")
        if any(not (s > 0) for s in self.nu_baselines):
            raise DataValidationError("grid nu_baselines must be positive")
        if self.permutations < 1:
            raise DataValidationError("permutations must be >= 1")
        if not (0 <= self.quantile <= 1):
            raise DataValidationError("quantile must lie in [0, 1]")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "nu_baselines", tuple(float(s) for s in self.nu_baselines))


@dataclass
class NullEntry:
    """Null-model fit and the per-subject residual sums it leaves behind."""

    fit: FitResult
    residuals: np.ndarray
    nu_baseline: float

    def entry_norms(self, X, groups=None, order=None) -> float:
        """``max_g ||S_g|| / sqrt(m_g)`` with outcomes reassigned by ``order``."""
        r = self.residuals if order is None else self.residuals[order]
        S = X.T @ r
        groups = PenaltyConfig(groups=groups).group_index(X.shape[1])
        return max(float(np.linalg.norm(S[g])) / np.sqrt(g.size) for g in groups)


def null_entry(design: AugmentedDesign, nu_baseline: float, controls: Optional[FitControls] = None,
               init=None) -> NullEntry:
    """Fit the covariate-free model and keep the subject-level score residuals."""
    free = np.zeros(design.n_features, dtype=bool)
    res = fit(design, PenaltyConfig(0.0, 1.0, nu_baseline), init=init, controls=controls, free=free)
    model = _Model(design, res.penalty, free)
    lam = hazard(model.eta(res.params.to_flat()))
    r = np.bincount(design.subject_index, weights=design.responses - lam, minlength=design.n_subjects)
    return NullEntry(res, r, nu_baseline)


def _permutation_entries(entry: NullEntry, X, K, seed, groups, permutations=None):
    n = X.shape[0]
    if permutations is not None:
        orders = [np.asarray(o, dtype=int) for o in permutations]
    else:
        children = np.random.SeedSequence(seed).spawn(K)
        orders = [np.random.default_rng(c).permutation(n) for c in children]
    return np.array([entry.entry_norms(X, groups, o) for o in orders])


def permutation_select_nu(design: AugmentedDesign, alpha: float, nu_baseline: float, K: int = 20,
                          seed: int = 0, quantile: float = 0.95, groups=None, entry: Optional[NullEntry] = None,
                          permutations: Optional[Sequence] = None, controls: Optional[FitControls] = None) -> float:
    """Permutation choice of the elastic-net strength.

    Outcome triplets ``(t, l, delta)`` are permuted across subjects while the
    covariates stay put; each permuted data set yields the smallest ``nu``
    at which no coefficient (group) enters, ``max_j |S_j(null)| / alpha``.
    The requested quantile of the ``K`` values is returned (0.5 = median).

    The covariate-free null model is invariant to relabelling subjects, so it
    is fitted once and its subject residual sums are permuted.
    """
    if not (0 < alpha <= 1):
        raise DataValidationError("permutation selection needs alpha in (0, 1]")
    if K < 1:
        raise DataValidationError("K must be >= 1")
    if entry is None:
        entry = null_entry(design, nu_baseline, controls)
    values = _permutation_entries(entry, design.subject_covariates, K, seed, groups, permutations)
    return float(np.quantile(values, quantile)) / alpha


def bic(result: FitResult, design: AugmentedDesign) -> float:
    """``-2 loglik + df log(N_pseudo)`` with the predicted frailties plugged in.

    ``df = 1 + |active beta| + t_max + q(q+1)/2``.
    """
    model = _Model(design, result.penalty)
    eta = model.eta(result.params.to_flat())
    q = design.n_random
    df = 1 + np.count_nonzero(result.params.coefficients) + design.t_max + q * (q + 1) // 2
    return -2.0 * model.loglik(eta) + df * np.log(design.n_pseudo)


@dataclass
class GridCell:
    alpha: float
    nu_baseline: float
    nu: float
    result: FitResult
    bic: float

    @property
    def converged(self) -> bool:
        return self.result.converged


@dataclass
class GridSearchResult:
    best: Optional[GridCell]
    cells: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def penalty(self) -> PenaltyConfig:
        return self.best.result.penalty


def grid_search(design: AugmentedDesign, grid: Optional[TuningGrid] = None, controls: Optional[FitControls] = None,
                groups=None, init=None) -> GridSearchResult:
    """Fit every ``(alpha, nu_s)`` cell at its permutation ``nu``; keep the BIC minimiser.

    Cells are visited ``nu_s``-major in grid order, each warm-started from
    the previous cell. Nonconverged cells are reported but never chosen.
    """
    grid = grid or TuningGrid()
    X = design.subject_covariates
    cells = []
    excluded = []
    warm = init
    null_warm = None
    for s_idx, nu_s in enumerate(grid.nu_baselines):
        entry = null_entry(design, nu_s, controls, init=null_warm)
        null_warm = entry.fit.params
        values = _permutation_entries(entry, X, grid.permutations, grid.seed, groups)
        base = float(np.quantile(values, grid.quantile))
        for alpha in grid.alphas:
            nu = base / alpha
            penalty = PenaltyConfig(nu, alpha, nu_s, groups)
            res = fit(design, penalty, init=warm if warm is not None else null_warm, controls=controls)
            cell = GridCell(alpha, nu_s, nu, res, bic(res, design))
            cells.append(cell)
            if res.converged:
                warm = res.params
            else:
                excluded.append(cell)
                logger.warning("grid cell alpha=%g nu_s=%g did not converge", alpha, nu_s)
    usable = [c for c in cells if c.converged]
    best = min(usable, key=lambda c: c.bic) if usable else None
    return GridSearchResult(best, cells, excluded)
