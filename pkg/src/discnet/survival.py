"""Discrete-time hazard model, pseudo-observation expansion and objective.

A subject observed over cycles ``l_i .. t_i`` contributes one Bernoulli row
per at-risk cycle, so the left-truncated, right-censored discrete survival
likelihood becomes a binary-regression likelihood on the stacked rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from .exceptions import DataValidationError

__all__ = [
    "SurvivalObservation",
    "AugmentedDesign",
    "ModelParameters",
    "PenaltyConfig",
    "hazard",
    "survivor",
    "augment",
    "augment_arrays",
    "linear_predictor",
    "log_likelihood",
    "penalty_value",
    "penalized_objective",
    "frailty_precision",
]

EIGEN_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# hazard / survivor
# ---------------------------------------------------------------------------

def hazard(eta):
    """Logistic inverse link ``1 / (1 + exp(-eta))``.

    Evaluated on the sign-split form so that large ``|eta|`` never overflows.
    Scalars in, scalar out.
    """
    eta_arr = np.asarray(eta, dtype=float)
    out = np.empty_like(eta_arr)
    pos = eta_arr >= 0
    e = np.exp(-np.abs(eta_arr))
    out[pos] = 1.0 / (1.0 + e[pos])
    out[~pos] = e[~pos] / (1.0 + e[~pos])
    if out.ndim == 0:
        return float(out)
    return out


def survivor(hazards) -> float:
    """``S(t) = prod_{u < t} (1 - lambda_u)`` for the hazards of cycles 1..t-1."""
    lam = np.asarray(hazards, dtype=float).ravel()
    if np.any(~np.isfinite(lam)) or np.any(lam < 0) or np.any(lam > 1):
        raise DataValidationError("hazards must lie in [0, 1]")
    return float(np.prod(1.0 - lam))


def _log1pexp(eta: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, eta)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalObservation:
    """One subject: observed cycle ``time``, entry cycle ``truncation``, event flag."""

    subject_id: Hashable
    time: int
    truncation: int
    event: bool
    covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float).ravel())


@dataclass
class AugmentedDesign:
    """Stacked pseudo-observations.

    Covariates are time-constant, so the fixed block is stored per subject and
    expanded on demand; ``random_rows`` holds ``z_is`` for every pseudo-row.
    """

    responses: np.ndarray
    subject_covariates: np.ndarray
    subject_index: np.ndarray
    risk_time: np.ndarray
    random_rows: np.ndarray
    t_max: int
    subject_ids: Optional[list] = None

    @property
    def n_pseudo(self) -> int:
        return self.responses.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.subject_covariates.shape[0]

    @property
    def n_features(self) -> int:
        return self.subject_covariates.shape[1]

    @property
    def n_random(self) -> int:
        return self.random_rows.shape[1]

    @property
    def n_params(self) -> int:
        return 1 + self.n_features + self.t_max + self.n_subjects * self.n_random

    @property
    def fixed_block(self) -> np.ndarray:
        return self.subject_covariates[self.subject_index]

    @property
    def baseline_block(self) -> np.ndarray:
        A = np.zeros((self.n_pseudo, self.t_max))
        A[np.arange(self.n_pseudo), self.risk_time - 1] = 1.0
        return A

    @property
    def random_block(self) -> np.ndarray:
        q = self.n_random
        Z = np.zeros((self.n_pseudo, self.n_subjects * q))
        cols = self.subject_index[:, None] * q + np.arange(q)[None, :]
        Z[np.arange(self.n_pseudo)[:, None], cols] = self.random_rows
        return Z

    def design_matrix(self) -> np.ndarray:
        """Dense ``H'`` with columns ordered (intercept, X, A, Z)."""
        return np.hstack([
            np.ones((self.n_pseudo, 1)),
            self.fixed_block,
            self.baseline_block,
            self.random_block,
        ])

    def subject_rows(self) -> list:
        """Row indices of each subject, in subject order."""
        order = np.argsort(self.subject_index, kind="stable")
        bounds = np.searchsorted(self.subject_index[order], np.arange(self.n_subjects + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.n_subjects)]


@dataclass
class ModelParameters:
    """Full parameter set ``(beta0, beta, gamma, b)`` plus frailty covariance ``Q``."""

    intercept: float
    coefficients: np.ndarray
    baseline: np.ndarray
    random_effects: np.ndarray
    frailty_cov: np.ndarray

    def __post_init__(self):
        self.intercept = float(self.intercept)
        self.coefficients = np.asarray(self.coefficients, dtype=float).ravel()
        self.baseline = np.asarray(self.baseline, dtype=float).ravel()
        self.random_effects = np.asarray(self.random_effects, dtype=float).ravel()
        self.frailty_cov = np.atleast_2d(np.asarray(self.frailty_cov, dtype=float))

    @classmethod
    def zeros(cls, design: AugmentedDesign, frailty_var: float = 0.1) -> "ModelParameters":
        q = design.n_random
        return cls(
            0.0,
            np.zeros(design.n_features),
            np.zeros(design.t_max),
            np.zeros(design.n_subjects * q),
            frailty_var * np.eye(q),
        )

    def to_flat(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients, self.baseline, self.random_effects])

    @classmethod
    def from_flat(cls, theta, p: int, t_max: int, frailty_cov) -> "ModelParameters":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:1 + p], theta[1 + p:1 + p + t_max], theta[1 + p + t_max:], frailty_cov)

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.intercept,
            self.coefficients.copy(),
            self.baseline.copy(),
            self.random_effects.copy(),
            self.frailty_cov.copy(),
        )

    def check_against(self, design: AugmentedDesign) -> None:
        q = design.n_random
        if self.coefficients.shape[0] != design.n_features:
            raise DataValidationError("coefficient length does not match the design")
        if self.baseline.shape[0] != design.t_max:
            raise DataValidationError("baseline length does not match t_max")
        if self.random_effects.shape[0] != design.n_subjects * q:
            raise DataValidationError("random-effect length does not match n * q")
        if self.frailty_cov.shape != (q, q):
            raise DataValidationError("frailty covariance must be q x q")


@dataclass(frozen=True)
class PenaltyConfig:
    """Elastic-net strength ``nu``, L1 share ``alpha``, baseline ridge ``nu_baseline``.

    ``groups`` optionally lists disjoint tuples of coefficient indices that are
    penalised with the group norm; other coefficients keep the scalar penalty.
    """

    nu: float = 0.0
    alpha: float = 1.0
    nu_baseline: float = 100.0
    groups: Optional[tuple] = None

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu >= 0):
            raise DataValidationError("nu must be a finite nonnegative number")
        if not (np.isfinite(self.nu_baseline) and self.nu_baseline >= 0):
            raise DataValidationError("nu_baseline must be a finite nonnegative number")
        if not (0.0 <= self.alpha <= 1.0):
            raise DataValidationError("alpha must lie in [0, 1]")
        if self.groups is not None:
            groups = tuple(tuple(int(j) for j in g) for g in self.groups)
            seen = set()
            for g in groups:
                if len(g) == 0:
                    raise DataValidationError("groups must be nonempty")
                if seen.intersection(g) or len(set(g)) != len(g):
                    raise DataValidationError("groups must be disjoint")
                seen.update(g)
            object.__setattr__(self, "groups", groups)

    def with_nu(self, nu: float) -> "PenaltyConfig":
        return PenaltyConfig(nu, self.alpha, self.nu_baseline, self.groups)

    def group_index(self, p: int) -> list:
        """Every coefficient as a group; ungrouped ones become singletons."""
        groups = [np.array(g, dtype=int) for g in (self.groups or ())]
        for g in groups:
            if g.min() < 0 or g.max() >= p:
                raise DataValidationError("group index out of range")
        covered = set(int(j) for g in groups for j in g)
        singles = [np.array([j]) for j in range(p) if j not in covered]
        return singles + groups


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

RandomSpec = Callable[[np.ndarray, SurvivalObservation], np.ndarray]


def augment_arrays(X, time, truncation, event, t_max: int, random_rows=None, subject_ids=None) -> AugmentedDesign:
    """Expand subject arrays into the pseudo-observation design.

    ``random_rows`` optionally supplies ``z_is`` for each pseudo-row (in the
    order produced here: subject-major, cycle-minor). Defaults to a random
    intercept.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    time = np.asarray(time)
    truncation = np.ones_like(time) if truncation is None else np.asarray(truncation)
    event = np.asarray(event)
    n = X.shape[0]
    if not (time.shape == truncation.shape == event.shape == (n,)):
        raise DataValidationError("time, truncation, event and X must have matching lengths")
    if not np.all(np.isfinite(X)):
        raise DataValidationError("covariates must be finite")
    for name, arr in (("time", time), ("truncation", truncation)):
        if not np.all(np.isfinite(arr.astype(float))) or np.any(arr != np.round(arr)):
            raise DataValidationError(f"{name} must hold integers")
    time = time.astype(int)
    truncation = truncation.astype(int)
    if not np.all(np.isin(event, (0, 1, True, False))):
        raise DataValidationError("event must be binary")
    event = event.astype(bool)
    if np.any(truncation < 1):
        raise DataValidationError("truncation times must be >= 1")
    bad = np.flatnonzero(truncation > time)
    if bad.size:
        raise DataValidationError(f"truncation exceeds observed time for rows {bad[:10].tolist()}")
    if t_max is None:
        t_max = int(time.max())
    if np.any(time > t_max):
        raise DataValidationError(f"observed time exceeds t_max={t_max}")

    counts = time - truncation + 1
    subject_index = np.repeat(np.arange(n), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    risk_time = np.repeat(truncation, counts) + (np.arange(subject_index.size) - starts)
    y = np.zeros(subject_index.size)
    last = np.cumsum(counts) - 1
    y[last] = event.astype(float)
    if random_rows is None:
        random_rows = np.ones((subject_index.size, 1))
    random_rows = np.asarray(random_rows, dtype=float)
    if random_rows.ndim == 1:
        random_rows = random_rows[:, None]
    if random_rows.shape[0] != subject_index.size:
        raise DataValidationError("random design must have one row per pseudo-observation")
    return AugmentedDesign(y, X, subject_index, risk_time.astype(int), random_rows, int(t_max),
                           None if subject_ids is None else list(subject_ids))


def augment(records: Sequence[SurvivalObservation], t_max: int,
            random_effect_spec: Optional[RandomSpec] = None) -> AugmentedDesign:
    """Pseudo-observation design for a list of :class:`SurvivalObservation`.

    ``random_effect_spec(risk_times, record)`` returns the ``(len, q)`` random
    design for one subject; ``None`` means a random intercept.
    """
    if len(records) == 0:
        raise DataValidationError("no records")
    X = np.vstack([r.covariates for r in records]) if records[0].covariates.size else np.zeros((len(records), 0))
    time = np.array([r.time for r in records])
    trunc = np.array([r.truncation for r in records])
    event = np.array([bool(r.event) for r in records])
    Z = None
    if random_effect_spec is not None:
        blocks = []
        for r in records:
            if r.truncation > r.time:
                raise DataValidationError(f"subject {r.subject_id}: truncation exceeds observed time")
            s = np.arange(r.truncation, r.time + 1)
            blocks.append(np.atleast_2d(np.asarray(random_effect_spec(s, r), dtype=float)).reshape(len(s), -1))
        Z = np.vstack(blocks)
    return augment_arrays(X, time, trunc, event, t_max, Z, [r.subject_id for r in records])


# ---------------------------------------------------------------------------
# likelihood pieces
# ---------------------------------------------------------------------------

def linear_predictor(design: AugmentedDesign, params: ModelParameters) -> np.ndarray:
    q = design.n_random
    B = params.random_effects.reshape(design.n_subjects, q)
    eta_subj = params.intercept + design.subject_covariates @ params.coefficients
    eta = eta_subj[design.subject_index] + params.baseline[design.risk_time - 1]
    eta += np.einsum("rk,rk->r", design.random_rows, B[design.subject_index])
    return eta


def _binary_loglik(y: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(y * eta - _log1pexp(eta)))


def log_likelihood(design: AugmentedDesign, params: ModelParameters) -> float:
    """Conditional binary log-likelihood ``log f(y | beta0, beta, gamma, b)``."""
    return _binary_loglik(design.responses, linear_predictor(design, params))


def frailty_precision(Q) -> tuple:
    """Inverse of ``Q`` with eigenvalues floored at 1e-10.

    Returns ``(Q_inv, floored)``; ``floored`` flags a degenerate frailty fit.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Q = 0.5 * (Q + Q.T)
    vals, vecs = np.linalg.eigh(Q)
    floored = bool(np.any(vals < EIGEN_FLOOR))
    vals = np.maximum(vals, EIGEN_FLOOR)
    return (vecs / vals) @ vecs.T, floored


def penalty_value(beta: np.ndarray, penalty: PenaltyConfig) -> float:
    """Elastic-net (or group elastic-net) penalty on ``beta``."""
    beta = np.asarray(beta, dtype=float)
    nu, a = penalty.nu, penalty.alpha
    total = 0.0
    for g in penalty.group_index(beta.shape[0]):
        bg = beta[g]
        if g.size == 1:
            l1 = abs(bg[0])
        else:
            l1 = np.sqrt(g.size) * np.linalg.norm(bg)
        total += a * l1 + (1 - a) * float(bg @ bg) / 2
    return nu * total


def penalized_objective(design: AugmentedDesign, params: ModelParameters, penalty: PenaltyConfig) -> float:
    """Laplace-approximated penalised log-likelihood.

    ``log f(y|.) - b'Q_b^{-1}b/2 - nu * EN(beta) - nu_s * |gamma|^2 / 2``
    """
    params.check_against(design)
    q = design.n_random
    Q_inv, _ = frailty_precision(params.frailty_cov)
    B = params.random_effects.reshape(design.n_subjects, q)
    quad = float(np.einsum("ik,kl,il->", B, Q_inv, B))
    value = (log_likelihood(design, params) - 0.5 * quad
             - penalty_value(params.coefficients, penalty)
             - penalty.nu_baseline * float(params.baseline @ params.baseline) / 2)
    return value
