"""Covariate preparation.

Log-offset standardisation, limit-of-detection substitution, binarisation
of flagged covariates, and the lipid-concomitant generalised Box-Cox
transform whose power is estimated by a small logistic MCMC.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import binarize
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DataValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "LodTable",
    "McmcControls",
    "ConcomitantModel",
    "log_offset_standardize",
    "apply_lod_substitution",
    "binarize_nonlinear",
    "boxcox",
    "boxcox_generalized",
    "fit_concomitant_stage1",
    "transform_stage2",
    "effective_sample_size",
    "LogOffsetStandardizer",
    "LodSubstituter",
    "ConcomitantTransformer",
]

WL, WOL = "WL", "WOL"
KAPPA_BOUNDS = (-3.0, 3.0)
PRIOR_SD = 10.0
OFFSET_BUMP = 1e-6


def _standardize(v, name="values"):
    sd = np.std(v, ddof=1) if v.size > 1 else 0.0
    if not sd > 0 or not np.isfinite(sd):
        raise DataValidationError(f"covariate {name!r} has zero variance after transformation")
    return (v - v.mean()) / sd, float(v.mean()), float(sd)


def log_offset_standardize(values, name: str = "values", return_constants: bool = False):
    """``(log(1 + x) - mean) / sd`` with the sample (n - 1) standard deviation."""
    x = np.asarray(values, dtype=float)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DataValidationError(f"covariate {name!r} must be finite and nonnegative for log(1 + x)")
    out, mean, sd = _standardize(np.log1p(x), name)
    return (out, mean, sd) if return_constants else out


@dataclass(frozen=True)
class LodTable:
    """Per-covariate detection limits and the substitution policy."""

    limits: Mapping[str, float] = field(default_factory=dict)
    policy: str = WOL

    def __post_init__(self):
        if self.policy not in (WL, WOL):
            raise DataValidationError(f"LOD policy must be {WL!r} or {WOL!r}, got {self.policy!r}")
        for k, v in self.limits.items():
            if not (np.isfinite(v) and v > 0):
                raise DataValidationError(f"LOD for {k!r} must be positive and finite")

    def limit(self, name):
        return self.limits.get(name)


def apply_lod_substitution(values, table: LodTable, name=None, lod: Optional[float] = None, return_count=False):
    """Replace values below the detection limit by ``LOD / sqrt(2)`` under the WL policy.

    ``lod`` overrides the table entry for ``name``; covariates without an
    entry are returned unchanged.
    """
    x = np.array(values, dtype=float)
    limit = lod if lod is not None else table.limit(name)
    count = 0
    if table.policy == WL and limit is not None:
        below = x < limit
        count = int(below.sum())
        x[below] = limit / np.sqrt(2.0)
    return (x, count) if return_count else x


def binarize_nonlinear(values, threshold: float) -> np.ndarray:
    """1 where the value exceeds ``threshold``, else 0."""
    if not np.isfinite(threshold):
        raise DataValidationError("binarization threshold must be finite")
    x = np.asarray(values, dtype=float)
    return binarize(x.reshape(-1, 1), threshold=threshold).ravel()


def boxcox(y, kappa: float):
    """``(y^kappa - 1) / kappa``, ``log y`` at ``kappa = 0``."""
    y = np.asarray(y, dtype=float)
    if kappa == 0:
        return np.log(y)
    # expm1 keeps the small-kappa branch continuous
    return np.expm1(kappa * np.log(y)) / kappa


def boxcox_generalized(x, s, kappa: float, k_x: float = 1.0):
    """``BxCx(log(k_x + x) / log(1 + s), kappa)``.

    Raises :class:`DataValidationError` naming the first offending record
    when the ratio is not positive.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    num = np.log(k_x + x) if np.all(k_x + x > 0) else np.full(np.broadcast(x, s).shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / np.log1p(s)
    bad = ~(ratio > 0) | ~np.isfinite(ratio)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        xi = np.atleast_1d(np.broadcast_to(x, bad.shape))[idx]
        si = np.atleast_1d(np.broadcast_to(s, bad.shape))[idx]
        raise DataValidationError(
            f"Box-Cox ratio not positive at record {idx} (x={xi!r}, s={si!r}, k_x={k_x!r})")
    out = boxcox(ratio, kappa)
    return float(out) if np.ndim(out) == 0 else out


def _offset_for(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DataValidationError("chemical values must be nonnegative")
    if np.any(x == 0):
        warnings.warn("zero chemical values: offset k_x raised to 1 + 1e-6", RuntimeWarning, stacklevel=3)
        return 1.0 + OFFSET_BUMP
    return 1.0


# ---------------------------------------------------------------------------
# Stage 1 MCMC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcControls:
    chains: int = 3
    iterations: int = 10_000
    burn_in: int = 5_000
    seed: int = 0
    target_acceptance: float = 0.44

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 2 or not (0 <= self.burn_in < self.iterations):
            raise DataValidationError("need chains >= 1 and 0 <= burn_in < iterations")


@dataclass
class ConcomitantModel:
    kappa: float
    offset: float
    posterior_draws: np.ndarray
    alpha0: float
    alpha1: float
    acceptance: dict
    ess: float
    rhat: float
    flags: list
    lipid_offset: float = 1.0

    @property
    def kappa_interval(self):
        return tuple(np.quantile(self.posterior_draws, [0.025, 0.975]))


def effective_sample_size(draws) -> float:
    """Multi-chain ESS from the initial positive sequence of autocorrelations.

    ``draws`` has shape ``(chains, n)``.
    """
    d = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = d.shape
    if n < 4:
        return float(m * n)
    c = d - d.mean(axis=1, keepdims=True)
    f = np.fft.rfft(c, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    w = acov[:, 0].mean() * n / (n - 1)
    var = w * (n - 1) / n + (d.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    if not var > 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var
    rho[0] = 1.0
    total = 0.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / np.log10(max(m * n, 10)))
    return float(m * n / tau)


def _rhat(draws) -> float:
    d = np.atleast_2d(draws)
    m, n = d.shape
    if m < 2:
        return float("nan")
    B = n * d.mean(axis=1).var(ddof=1)
    W = d.var(axis=1, ddof=1).mean()
    return float(np.sqrt(((n - 1) / n * W + B / n) / W)) if W > 0 else float("nan")


def _standardized_g(x, s, kappa, k_x):
    """Row-wise standardised ``g`` for a vector of ``kappa`` values, shape (chains, n)."""
    ratio = np.log(k_x + x) / np.log1p(s)
    lr = np.log(ratio)[None, :]
    k = np.asarray(kappa, dtype=float)[:, None]
    small = np.abs(k) < 1e-12
    g = np.where(small, lr, np.expm1(k * lr) / np.where(small, 1.0, k))
    sd = g.std(axis=1, ddof=1, keepdims=True)
    sd = np.where(sd > 0, sd, np.inf)
    return (g - g.mean(axis=1, keepdims=True)) / sd


def _loglik(y, a0, a1, g):
    eta = a0[:, None] + a1[:, None] * g
    return np.sum(y * eta - np.logaddexp(0.0, eta), axis=1)


def _logprior(a0, a1, kappa):
    inside = (kappa > KAPPA_BOUNDS[0]) & (kappa < KAPPA_BOUNDS[1])
    lp = -0.5 * (a0 ** 2 + a1 ** 2) / PRIOR_SD ** 2
    return np.where(inside, lp, -np.inf)


def fit_concomitant_stage1(chemical, lipid, infertile, controls: Optional[McmcControls] = None,
                           init_kappa: float = 0.0) -> ConcomitantModel:
    """Posterior of ``kappa`` in ``logit p = a0 + a1 * std(g(x, s; kappa))``.

    Adaptive random-walk Metropolis-within-Gibbs over ``(a0, a1, kappa)``
    with N(0, 10^2) priors on the coefficients and U(-3, 3) on ``kappa``.
    Proposal scales adapt toward 44% acceptance during burn-in only, so the
    kept draws come from a fixed kernel. Chains run side by side.
    """
    controls = controls or McmcControls()
    x = np.asarray(chemical, dtype=float)
    s = np.asarray(lipid, dtype=float)
    y = np.asarray(infertile, dtype=float)
    if not (x.shape == s.shape == y.shape) or x.ndim != 1:
        raise DataValidationError("chemical, lipid and outcome must be aligned 1-d arrays")
    if np.any((y != 0) & (y != 1)):
        raise DataValidationError("infertility outcome must be binary")
    if np.any(s <= 0):
        raise DataValidationError("lipid values must be positive")
    k_x = _offset_for(x)
    boxcox_generalized(x, s, 0.0, k_x)  # domain check with record numbers

    C = controls.chains
    rng = np.random.default_rng(controls.seed)
    state = np.column_stack([rng.normal(0, 0.1, C), rng.normal(0, 0.1, C),
                             np.clip(init_kappa + rng.normal(0, 0.1, C), -2.9, 2.9)])
    g = _standardized_g(x, s, state[:, 2], k_x)
    ll = _loglik(y, state[:, 0], state[:, 1], g)
    lp = _logprior(*state.T)
    log_scale = np.log(np.full((C, 3), 0.1))
    keep = controls.iterations - controls.burn_in
    draws = np.empty((C, keep, 3))
    accepted = np.zeros((C, 3))
    window = np.zeros((C, 3))
    for it in range(controls.iterations):
        for k in range(3):
            prop = state.copy()
            prop[:, k] += np.exp(log_scale[:, k]) * rng.standard_normal(C)
            lp_new = _logprior(*prop.T)
            g_new = g if k < 2 else _standardized_g(x, s, prop[:, 2], k_x)
            with np.errstate(invalid="ignore"):
                ll_new = np.where(np.isfinite(lp_new), _loglik(y, prop[:, 0], prop[:, 1], g_new), -np.inf)
            log_ratio = ll_new + lp_new - ll - lp
            acc = np.log(rng.uniform(size=C)) < log_ratio
            state[acc] = prop[acc]
            ll = np.where(acc, ll_new, ll)
            lp = np.where(acc, lp_new, lp)
            if k == 2 and acc.any():
                g[acc] = g_new[acc]
            if it < controls.burn_in:
                window[:, k] += acc
            else:
                accepted[:, k] += acc
        if it < controls.burn_in and (it + 1) % 50 == 0:
            rate = window / 50.0
            step = min(0.5, 5.0 / np.sqrt((it + 1) / 50.0))
            log_scale += step * (rate - controls.target_acceptance)
            window[:] = 0
        if it >= controls.burn_in:
            draws[:, it - controls.burn_in] = state

    rates = accepted / keep
    kappa_draws = draws[:, :, 2]
    acceptance = {"alpha0": float(rates[:, 0].mean()), "alpha1": float(rates[:, 1].mean()),
                  "kappa": float(rates[:, 2].mean())}
    acceptance["overall"] = float(np.mean(list(acceptance.values())))
    ess = effective_sample_size(kappa_draws)
    flags = []
    if np.any(rates < 0.05) or np.any(rates > 0.8):
        flags.append("poor_mixing")
    lo, hi = KAPPA_BOUNDS
    near = np.mean((kappa_draws < lo + 0.1) | (kappa_draws > hi - 0.1))
    if near > 0.05:
        flags.append("kappa_at_prior_bound")
    prior_sd = (hi - lo) / np.sqrt(12.0)
    if kappa_draws.std() > 0.8 * prior_sd:
        flags.append("kappa_not_identified")
    for f in flags:
        logger.warning("concomitant stage 1: %s", f)
    flat = draws.reshape(-1, 3)
    return ConcomitantModel(
        kappa=float(np.median(flat[:, 2])), offset=k_x, posterior_draws=flat[:, 2].copy(),
        alpha0=float(np.median(flat[:, 0])), alpha1=float(np.median(flat[:, 1])),
        acceptance=acceptance, ess=ess, rhat=_rhat(kappa_draws), flags=flags)


def transform_stage2(chemical, lipid, model: ConcomitantModel, name: str = "chemical") -> np.ndarray:
    """Standardised ``g(x, s; kappa_hat)``; the lipid column is dropped downstream."""
    g = boxcox_generalized(chemical, lipid, model.kappa, model.offset)
    return _standardize(np.atleast_1d(g), name)[0]


# ---------------------------------------------------------------------------
# estimator wrappers
# ---------------------------------------------------------------------------

class LogOffsetStandardizer(TransformerMixin, BaseEstimator):
    """Column-wise ``log(1 + x)`` followed by unit-variance standardisation."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if np.any(X < 0):
            raise DataValidationError("log-offset standardisation needs nonnegative values")
        L = np.log1p(X)
        self.mean_ = L.mean(axis=0)
        self.scale_ = L.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
        bad = np.flatnonzero(~(self.scale_ > 0))
        if bad.size:
            raise DataValidationError(f"zero-variance columns: {bad.tolist()}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=float)
        return (np.log1p(X) - self.mean_) / self.scale_


class LodSubstituter(TransformerMixin, BaseEstimator):
    """WL / WOL substitution with one detection limit per column (NaN = none)."""

    def __init__(self, limits=None, policy: str = WOL):
        self.limits = limits
        self.policy = policy

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        LodTable(policy=self.policy)
        lim = np.full(X.shape[1], np.nan) if self.limits is None else np.asarray(self.limits, dtype=float)
        if lim.shape != (X.shape[1],):
            raise DataValidationError("one limit per column required")
        self.limits_ = lim
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "limits_")
        X = check_array(X, dtype=float, copy=True)
        if self.policy == WL:
            for j, lim in enumerate(self.limits_):
                if np.isfinite(lim):
                    X[X[:, j] < lim, j] = lim / np.sqrt(2.0)
        return X


class ConcomitantTransformer(TransformerMixin, BaseEstimator):
    """Stage 1 + Stage 2 on a two-column ``[chemical, lipid]`` input.

    ``fit`` needs the binary infertility outcome as ``y``.
    """

    def __init__(self, chains=3, iterations=10_000, burn_in=5_000, seed=0):
        self.chains = chains
        self.iterations = iterations
        self.burn_in = burn_in
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise DataValidationError("expected columns [chemical, lipid]")
        ctl = McmcControls(self.chains, self.iterations, self.burn_in, self.seed)
        self.model_ = fit_concomitant_stage1(X[:, 0], X[:, 1], np.asarray(y), ctl)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return transform_stage2(X[:, 0], X[:, 1], self.model_).reshape(-1, 1)
