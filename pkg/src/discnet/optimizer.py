"""Modified gradient ascent with EM frailty updates for the penalised model.

Parameters are handled as one flat vector ``theta`` ordered
``(beta0, beta_1..beta_p, gamma_1..gamma_T, b_1..b_n)`` where each ``b_i``
holds ``q`` entries. The frailty covariance ``Q`` is updated in a separate
EM block after each ``theta`` step.

The ``theta`` step follows the sign-preserving scheme for L1 penalties: take
the gradient of the penalised objective (using the subgradient that points
uphill), move along it either to the optimal quadratic step or to the first
point where a coordinate reaches zero, and switch to Fisher scoring on the
active coordinates once the active set has settled.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, sparse

from .exceptions import DataValidationError, NumericalError
from .survival import (
    AugmentedDesign,
    ModelParameters,
    PenaltyConfig,
    frailty_precision,
    hazard,
    penalty_value,
)

logger = logging.getLogger(__name__)

__all__ = [
    "FitControls",
    "FitResult",
    "OptimizerState",
    "score_vector",
    "penalized_score",
    "group_penalized_score",
    "fisher_matrix",
    "step_sizes",
    "ascent_update",
    "em_update_frailty",
    "fit",
    "refit_selected",
    "kkt_residuals",
]

INNER_RIDGE = 1e-8
SEPARATION_BOUND = 50.0


@dataclass
class FitControls:
    """Stopping rules and switches for :func:`fit`."""

    tol_objective: float = 1e-8
    tol_step: float = 1e-6
    tol_kkt: float = 1e-6
    tol_frailty: float = 1e-6
    max_iter: int = 5000
    fisher_after: int = 25
    fisher_stable: int = 5
    max_step: float = 2.0
    update_frailty: bool = True
    accelerate_em: bool = True
    chatter_limit: int = 5

    def __post_init__(self):
        for name in ("tol_objective", "tol_step", "tol_kkt", "tol_frailty", "max_step"):
            if not getattr(self, name) > 0:
                raise DataValidationError(f"{name} must be positive")
        if self.max_iter < 1:
            raise DataValidationError("max_iter must be >= 1")


@dataclass
class FitResult:
    params: ModelParameters
    converged: bool
    iterations: int
    objective: float
    selected: np.ndarray
    penalty: PenaltyConfig
    kkt_residual: float = np.nan
    covariance: Optional[np.ndarray] = None
    covariance_index: Optional[np.ndarray] = None
    flags: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def coef_(self) -> np.ndarray:
        return self.params.coefficients

    def standard_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.diag(self.covariance))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class _Model:
    """Design, penalty and index bookkeeping shared by all optimizer routines."""

    def __init__(self, design: AugmentedDesign, penalty: PenaltyConfig, free=None):
        self.design = design
        self.penalty = penalty
        self.X = design.subject_covariates
        self.subj = design.subject_index
        self.tidx = design.risk_time - 1
        self.Z = design.random_rows
        self.y = design.responses
        self.n, self.p = self.X.shape
        self.T = design.t_max
        self.q = design.n_random
        self.N = design.n_pseudo
        self.nb = self.n * self.q
        self.dim = 1 + self.p + self.T + self.nb
        self.sl_beta = slice(1, 1 + self.p)
        self.sl_gamma = slice(1 + self.p, 1 + self.p + self.T)
        self.sl_b = slice(1 + self.p + self.T, self.dim)
        rows = np.arange(self.N)
        self.agg_subj = sparse.csr_matrix((np.ones(self.N), (self.subj, rows)), shape=(self.n, self.N))
        self.agg_time = sparse.csr_matrix((np.ones(self.N), (self.tidx, rows)), shape=(self.T, self.N))

        free = np.ones(self.p, dtype=bool) if free is None else np.asarray(free, dtype=bool)
        if free.shape != (self.p,):
            raise DataValidationError("free mask must have one entry per coefficient")
        self.free = free
        groups = penalty.group_index(self.p)
        self.singles = np.array([g[0] for g in groups if g.size == 1 and free[g[0]]], dtype=int)
        self.groups = [g for g in groups if g.size > 1]
        for g in self.groups:
            if not (free[g].all() or (~free[g]).all()):
                raise DataValidationError("a group must be entirely free or entirely fixed")
        self.groups = [g for g in self.groups if free[g].all()]
        self.l1 = penalty.nu * penalty.alpha
        self.l2 = penalty.nu * (1 - penalty.alpha)

    # -- basic quantities ---------------------------------------------------

    def split(self, theta):
        return theta[0], theta[self.sl_beta], theta[self.sl_gamma], theta[self.sl_b].reshape(self.n, self.q)

    def eta(self, theta) -> np.ndarray:
        b0, beta, gamma, B = self.split(theta)
        out = (b0 + self.X @ beta)[self.subj] + gamma[self.tidx]
        if self.q:
            out = out + np.einsum("rk,rk->r", self.Z, B[self.subj])
        return out

    def direction_rows(self, v) -> np.ndarray:
        """``H'v`` evaluated row by row."""
        return self.eta(v)

    def loglik(self, eta) -> float:
        return float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))

    def objective(self, theta, Q_inv) -> float:
        _, beta, gamma, B = self.split(theta)
        quad = float(np.einsum("ik,kl,il->", B, Q_inv, B)) if self.q else 0.0
        return (self.loglik(self.eta(theta)) - 0.5 * quad - penalty_value(beta, self.penalty)
                - self.penalty.nu_baseline * float(gamma @ gamma) / 2)

    def score(self, lam) -> np.ndarray:
        r = self.y - lam
        r_subj = self.agg_subj @ r
        S = np.empty(self.dim)
        S[0] = r.sum()
        S[self.sl_beta] = self.X.T @ r_subj
        S[self.sl_gamma] = self.agg_time @ r
        if self.q:
            S[self.sl_b] = (self.agg_subj @ (r[:, None] * self.Z)).ravel()
        return S

    # -- penalised gradient -------------------------------------------------

    def penalized_score(self, theta, S, Q_inv) -> np.ndarray:
        _, beta, gamma, B = self.split(theta)
        out = S.copy()
        sb = out[self.sl_beta]
        sb[~self.free] = 0.0
        j = self.singles
        bj, Sj = beta[j], S[1 + j]
        active = bj != 0
        res = np.where(active, Sj - self.l2 * bj - self.l1 * np.sign(bj),
                       np.where(np.abs(Sj) > self.l1, Sj - self.l1 * np.sign(Sj), 0.0))
        sb[j] = res
        for g in self.groups:
            sb[g] = _group_case(beta[g], S[1 + g], self.l1, self.l2)
        out[self.sl_gamma] = S[self.sl_gamma] - self.penalty.nu_baseline * gamma
        if self.q:
            out[self.sl_b] = S[self.sl_b] - (B @ Q_inv).ravel()
        return out

    def kkt(self, theta, S, Q_inv) -> float:
        """Largest violation of the optimality conditions at ``theta``."""
        spen = self.penalized_score(theta, S, Q_inv)
        beta = theta[self.sl_beta]
        viol = [np.abs(spen[0]), np.max(np.abs(spen[self.sl_gamma]), initial=0.0)]
        if self.q:
            viol.append(np.max(np.abs(spen[self.sl_b])))
        j = self.singles
        if j.size:
            Sj = S[1 + j]
            act = beta[j] != 0
            v = np.where(act, np.abs(spen[1 + j]), np.maximum(np.abs(Sj) - self.l1, 0.0))
            viol.append(v.max())
        for g in self.groups:
            if np.any(beta[g] != 0):
                viol.append(np.linalg.norm(spen[1 + g]))
            else:
                viol.append(max(np.linalg.norm(S[1 + g]) - self.l1 * np.sqrt(g.size), 0.0))
        return float(max(viol))

    # -- curvature ----------------------------------------------------------

    def group_curvature(self, beta):
        """Hessian of the group-norm term for active groups, keyed by group."""
        out = []
        for g in self.groups:
            bg = beta[g]
            nrm = np.linalg.norm(bg)
            if nrm > 0 and self.l1 > 0:
                c = self.l1 * np.sqrt(g.size)
                out.append((g, c * (np.eye(g.size) / nrm - np.outer(bg, bg) / nrm ** 3)))
        return out

    def curvature(self, v, w, theta, Q_inv) -> float:
        """``v' F^pen v``."""
        u = self.direction_rows(v)
        _, vb, vg, VB = self.split(v)
        val = float(np.sum(w * u * u))
        val += self.l2 * float(vb @ vb) + self.penalty.nu_baseline * float(vg @ vg)
        if self.q:
            val += float(np.einsum("ik,kl,il->", VB, Q_inv, VB))
        for g, Hg in self.group_curvature(theta[self.sl_beta]):
            val += float(vb[g] @ Hg @ vb[g])
        return val

    def fixed_columns(self, beta_cols):
        """Dense fixed design ``[1, X[:, cols], A]`` on the pseudo-rows."""
        cols = [np.ones((self.N, 1)), self.X[:, beta_cols][self.subj]]
        A = np.zeros((self.N, self.T))
        A[np.arange(self.N), self.tidx] = 1.0
        cols.append(A)
        return np.hstack(cols)

    def blocks(self, beta_cols, w, theta, Q_inv):
        """Fisher blocks over fixed coordinates ``C = (beta0, beta[cols], gamma)`` and ``b``.

        Returns ``(C_index, F_CC, F_bC, F_bb)`` with ``F_bC`` of shape
        ``(n, q, |C|)`` and ``F_bb`` of shape ``(n, q, q)``.
        """
        beta_cols = np.asarray(beta_cols, dtype=int)
        G = self.fixed_columns(beta_cols)
        F_CC = G.T @ (w[:, None] * G)
        k = beta_cols.size
        K = np.zeros(G.shape[1])
        K[1:1 + k] = self.l2
        K[1 + k:] = self.penalty.nu_baseline
        F_CC[np.diag_indices_from(F_CC)] += K
        pos = {c: 1 + i for i, c in enumerate(beta_cols)}
        for g, Hg in self.group_curvature(theta[self.sl_beta]):
            if all(int(c) in pos for c in g):
                ix = np.array([pos[int(c)] for c in g])
                F_CC[np.ix_(ix, ix)] += Hg
        C_index = np.concatenate([[0], 1 + beta_cols, np.arange(self.sl_gamma.start, self.sl_gamma.stop)])
        if not self.q:
            return C_index, F_CC, np.zeros((self.n, 0, G.shape[1])), np.zeros((self.n, 0, 0))
        F_bC = np.empty((self.n, self.q, G.shape[1]))
        F_bb = np.empty((self.n, self.q, self.q))
        for a in range(self.q):
            wz = w * self.Z[:, a]
            F_bC[:, a, :] = self.agg_subj @ (wz[:, None] * G)
            F_bb[:, a, :] = self.agg_subj @ (wz[:, None] * self.Z)
        F_bb += Q_inv[None, :, :]
        return C_index, F_CC, F_bC, F_bb


def _group_case(bg, Sg, l1, l2):
    m = bg.size
    thr = l1 * np.sqrt(m)
    nb = np.linalg.norm(bg)
    if nb > 0:
        return Sg - l2 * bg - thr * bg / nb
    ns = np.linalg.norm(Sg)
    if ns > thr:
        return Sg * (1.0 - thr / ns)
    return np.zeros_like(Sg)


class _BlockSolver:
    """Solves ``F x = r`` for the bordered block-diagonal Fisher matrix."""

    def __init__(self, F_CC, F_bC, F_bb):
        self.flags = []
        self.F_bC = F_bC
        if F_bb.shape[1]:
            self.F_bb_inv = np.linalg.inv(F_bb)
            tmp = np.einsum("ikl,ild->ikd", self.F_bb_inv, F_bC)
            self.schur = F_CC - np.einsum("ikc,ikd->cd", F_bC, tmp)
            self._tmp = tmp
        else:
            self.F_bb_inv = F_bb
            self.schur = F_CC.copy()
            self._tmp = F_bC
        self.schur = 0.5 * (self.schur + self.schur.T)
        try:
            self.chol = linalg.cho_factor(self.schur)
        except linalg.LinAlgError:
            self.flags.append("schur_not_pd")
            ridge = INNER_RIDGE * max(1.0, np.abs(np.diag(self.schur)).max())
            self.schur = self.schur + ridge * np.eye(self.schur.shape[0])
            self.chol = linalg.cho_factor(self.schur)

    def solve(self, r_C, r_b):
        """``r_b`` has shape ``(n, q)``."""
        if r_b.shape[1]:
            u = np.einsum("ikl,il->ik", self.F_bb_inv, r_b)
            rhs = r_C - np.einsum("ikc,ik->c", self.F_bC, u)
        else:
            rhs = r_C
        x_C = linalg.cho_solve(self.chol, rhs)
        if r_b.shape[1]:
            x_b = u - np.einsum("ikc,c->ik", self._tmp, x_C)
        else:
            x_b = r_b
        return x_C, x_b

    def schur_inverse(self):
        return linalg.cho_solve(self.chol, np.eye(self.schur.shape[0]))

    def random_block_cov(self):
        """Diagonal ``b_i`` blocks of ``F^{-1}``."""
        if not self.F_bb_inv.shape[1]:
            return self.F_bb_inv
        Sinv = self.schur_inverse()
        return self.F_bb_inv + np.einsum("ikc,cd,ild->ikl", self._tmp, Sinv, self._tmp)


# ---------------------------------------------------------------------------
# optimizer state and public step operations
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Snapshot of the quantities used in one ``theta`` step."""

    design: AugmentedDesign
    penalty: PenaltyConfig
    theta: np.ndarray
    frailty_cov: np.ndarray
    score: np.ndarray
    penalized_score: np.ndarray
    weights: np.ndarray
    iteration: int = 0
    free: Optional[np.ndarray] = None
    _model: Optional[_Model] = field(default=None, repr=False)

    @classmethod
    def from_params(cls, design, params: ModelParameters, penalty: PenaltyConfig, free=None,
                    iteration: int = 0) -> "OptimizerState":
        params.check_against(design)
        model = _Model(design, penalty, free)
        theta = params.to_flat()
        lam = hazard(model.eta(theta))
        S = model.score(lam)
        Q_inv, _ = frailty_precision(params.frailty_cov) if model.q else (np.zeros((0, 0)), False)
        spen = model.penalized_score(theta, S, Q_inv)
        return cls(design, penalty, theta, params.frailty_cov.copy(), S, spen, lam * (1 - lam),
                   iteration, model.free, model)

    @property
    def model(self) -> _Model:
        if self._model is None:
            self._model = _Model(self.design, self.penalty, self.free)
        return self._model

    @property
    def params(self) -> ModelParameters:
        m = self.model
        return ModelParameters.from_flat(self.theta, m.p, m.T, self.frailty_cov)

    @property
    def frailty_precision(self) -> np.ndarray:
        if not self.model.q:
            return np.zeros((0, 0))
        return frailty_precision(self.frailty_cov)[0]

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.theta[self.model.sl_beta] != 0)

    @property
    def penalty_block(self) -> np.ndarray:
        """Diagonal-block ``K`` (dense)."""
        m = self.model
        K = np.zeros((m.dim, m.dim))
        K[np.arange(1, 1 + m.p), np.arange(1, 1 + m.p)] = m.l2
        gi = np.arange(m.sl_gamma.start, m.sl_gamma.stop)
        K[gi, gi] = self.penalty.nu_baseline
        Q_inv = self.frailty_precision
        for i in range(m.n):
            s = m.sl_b.start + i * m.q
            K[s:s + m.q, s:s + m.q] = Q_inv
        return K

    @property
    def fisher(self) -> np.ndarray:
        return fisher_matrix(self.design, self.params, self.penalty)

    def kink_mask(self) -> np.ndarray:
        """Coordinates of ``theta`` carrying an L1 kink at zero."""
        m = self.model
        mask = np.zeros(m.dim, dtype=bool)
        if m.l1 > 0:
            mask[1 + m.singles] = True
        return mask


def score_vector(design: AugmentedDesign, params: ModelParameters) -> np.ndarray:
    """Gradient ``H[y - lambda(theta)]`` of the unpenalised log-likelihood."""
    params.check_against(design)
    model = _Model(design, PenaltyConfig())
    return model.score(hazard(model.eta(params.to_flat())))


def penalized_score(state: OptimizerState, penalty: Optional[PenaltyConfig] = None) -> np.ndarray:
    """Uphill (sub)gradient of the penalised objective.

    Coordinates at zero whose score does not beat ``nu * alpha`` get 0; the
    baseline block is shrunk by ``nu_baseline * gamma`` and the random-effect
    block by ``Q_b^{-1} b``. The intercept is unpenalised.
    """
    if penalty is not None and penalty != state.penalty:
        state = OptimizerState.from_params(state.design, state.params, penalty, state.free)
    return state.model.penalized_score(state.theta, state.score, state.frailty_precision)


def group_penalized_score(state: OptimizerState, penalty: Optional[PenaltyConfig] = None) -> np.ndarray:
    """Penalised gradient restricted to the ``beta`` block, group norms included."""
    full = penalized_score(state, penalty)
    return full[state.model.sl_beta].copy()


def fisher_matrix(design: AugmentedDesign, params: ModelParameters, penalty: PenaltyConfig) -> np.ndarray:
    """Dense ``F^pen = H W H' + K``.

    The L1 part contributes nothing (it is piecewise linear); active group
    norms add their smooth Hessian, which vanishes for singleton groups.
    """
    params.check_against(design)
    model = _Model(design, penalty)
    theta = params.to_flat()
    lam = hazard(model.eta(theta))
    w = lam * (1 - lam)
    H = design.design_matrix()
    F = H.T @ (w[:, None] * H)
    state_K = np.zeros(model.dim)
    state_K[model.sl_beta] = model.l2
    state_K[model.sl_gamma] = penalty.nu_baseline
    F[np.diag_indices_from(F)] += state_K
    if model.q:
        Q_inv, _ = frailty_precision(params.frailty_cov)
        for i in range(model.n):
            s = model.sl_b.start + i * model.q
            F[s:s + model.q, s:s + model.q] += Q_inv
    for g, Hg in model.group_curvature(theta[model.sl_beta]):
        ix = 1 + g
        F[np.ix_(ix, ix)] += Hg
    return F


def _edge(theta, spen, kink, groups, l1):
    """First step length at which a kinked coordinate (or group) reaches zero."""
    t_edge = np.inf
    hit = None
    opp = kink & (np.sign(theta) == -np.sign(spen)) & (theta != 0)
    if np.any(opp):
        ts = -theta[opp] / spen[opp]
        k = int(np.argmin(ts))
        t_edge = float(ts[k])
        hit = ("coord", np.flatnonzero(opp)[k])
    if l1 > 0:
        for g in groups:
            ix = 1 + g
            tg = theta[ix]
            dot = float(tg @ spen[ix])
            if np.any(tg != 0) and dot < 0:
                t = -float(tg @ tg) / dot
                if t < t_edge:
                    t_edge, hit = t, ("group", ix)
    return t_edge, hit


def step_sizes(state_or_theta, spen=None, fisher=None, kink_mask=None):
    """``(t_edge, t_opt)`` for the ascent step.

    ``t_edge`` is the smallest ``-theta_i / S^pen_i`` over coordinates moving
    toward zero (``inf`` if none); ``t_opt = |S^pen|^2 / (S^pen' F S^pen)``
    maximises the quadratic model along the penalised gradient.

    Accepts an :class:`OptimizerState` or raw ``(theta, spen, fisher)``
    arrays; with raw arrays every coordinate is treated as kinked unless
    ``kink_mask`` says otherwise.
    """
    if isinstance(state_or_theta, OptimizerState):
        st = state_or_theta
        m = st.model
        t_edge, _ = _edge(st.theta, st.penalized_score, st.kink_mask(), m.groups, m.l1)
        curv = m.curvature(st.penalized_score, st.weights, st.theta, st.frailty_precision)
        v = st.penalized_score
    else:
        theta = np.atleast_1d(np.asarray(state_or_theta, dtype=float))
        v = np.atleast_1d(np.asarray(spen, dtype=float))
        kink = np.ones(theta.shape, dtype=bool) if kink_mask is None else np.asarray(kink_mask, dtype=bool)
        t_edge, _ = _edge(theta, v, kink, [], 0.0)
        F = np.eye(v.size) if fisher is None else np.atleast_2d(fisher)
        curv = float(v @ F @ v)
    if not np.any(v != 0):
        raise NumericalError("penalized score is identically zero; no step to take")
    if not curv > 0:
        raise NumericalError(f"nonpositive curvature {curv!r} along the penalized score")
    return t_edge, float(v @ v) / curv


def _sign_plus(theta, spen):
    return np.where(theta != 0, np.sign(theta), np.sign(spen))


def _fisher_candidate(model: _Model, theta, spen, w, Q_inv):
    """Fisher-scoring point on the coordinates with nonzero limiting sign.

    Returns ``(candidate, ok, flags, t_cross, cross)``. When the scoring
    point flips only coordinates that are currently nonzero, ``t_cross`` is
    the fraction of the step at which the first of them reaches zero and
    ``cross`` its flat index; otherwise ``t_cross`` is ``None``.
    """
    beta = theta[model.sl_beta]
    sb = spen[model.sl_beta]
    splus = _sign_plus(beta, sb)
    enter = (splus != 0) & model.free
    for _ in range(model.p + 1):
        cols = np.flatnonzero(enter)
        C_index, F_CC, F_bC, F_bb = model.blocks(cols, w, theta, Q_inv)
        solver = _BlockSolver(F_CC, F_bC, F_bb)
        x_C, x_b = solver.solve(spen[C_index], spen[model.sl_b].reshape(model.n, model.q))
        step = np.zeros_like(theta)
        step[C_index] = x_C
        step[model.sl_b] = x_b.ravel()
        cand = theta + step
        new_beta = cand[model.sl_beta]
        # zero coordinates the joint scoring step would push against their
        # entry sign stay at zero; the face-restricted step is re-solved
        refuse = np.zeros_like(enter)
        j = model.singles
        refuse[j] = enter[j] & (beta[j] == 0) & (np.sign(new_beta[j]) != splus[j])
        for g in model.groups:
            if np.all(beta[g] == 0) and enter[g[0]] and not float(new_beta[g] @ sb[g]) > 0:
                refuse[g] = True
        if model.l1 == 0 or not refuse.any():
            break
        enter &= ~refuse
    splus = np.where(enter | (beta != 0), splus, 0.0)
    ok = True
    t_cross, cross = None, None
    if model.l1 > 0:
        j = model.singles
        bad = j[(np.sign(new_beta[j]) != splus[j]) & (splus[j] != 0)]
        ok = bad.size == 0
        group_bad = False
        for g in model.groups:
            ref = beta[g] if np.any(beta[g] != 0) else sb[g] * (splus[g] != 0)
            if np.any(ref != 0) and not float(new_beta[g] @ ref) > 0:
                ok = False
                group_bad = True
        if not ok and not group_bad and np.all(beta[bad] != 0):
            ts = beta[bad] / (beta[bad] - new_beta[bad])
            k = int(np.argmin(ts))
            t_cross, cross = float(ts[k]), 1 + int(bad[k])
    return cand, ok, solver.flags, t_cross, cross


def _take_step(model: _Model, theta, spen, w, Q_inv, obj, use_fisher, max_step, flags):
    """One ``theta`` update. Returns ``(new_theta, new_obj, branch)``."""
    kink = np.zeros(model.dim, dtype=bool)
    if model.l1 > 0:
        kink[1 + model.singles] = True
    t_edge, hit = _edge(theta, spen, kink, model.groups, model.l1)
    curv = model.curvature(spen, w, theta, Q_inv)
    if not curv > 0:
        raise NumericalError(f"nonpositive curvature {curv!r} along the penalized score")
    t_opt = float(spen @ spen) / curv
    slack = 1e-10 * (1.0 + abs(obj))

    if t_opt < t_edge and use_fisher:
        t_cross = None
        try:
            cand, ok, fl, t_cross, cross = _fisher_candidate(model, theta, spen, w, Q_inv)
            flags.extend(f for f in fl if f not in flags)
        except (linalg.LinAlgError, np.linalg.LinAlgError):
            ok = False
            if "fisher_solve_failed" not in flags:
                flags.append("fisher_solve_failed")
        if ok or t_cross is not None:
            # the segment toward the scoring point keeps every sign up to the
            # first crossing, so capped and halved steps stay admissible
            delta = cand - theta
            if not ok:
                delta *= t_cross
            big = np.max(np.abs(delta))
            full = big <= max_step
            if not full:
                delta *= max_step / big
            for halving in range(30):
                cand = theta + delta
                if not ok and full and halving == 0:
                    cand[cross] = 0.0
                new_obj = model.objective(cand, Q_inv)
                if new_obj >= obj - slack:
                    return cand, new_obj, "fisher" if ok else "fisher_edge"
                delta *= 0.5

    if t_opt >= t_edge:
        t, branch = t_edge, "edge"
    else:
        t, branch = t_opt, "gradient"
    delta = t * spen
    big = np.max(np.abs(delta))
    scaled = big > max_step
    if scaled:
        delta *= max_step / big
    for halving in range(60):
        cand = theta + delta
        if branch == "edge" and not scaled and halving == 0 and hit is not None:
            if hit[0] == "coord":
                cand[hit[1]] = 0.0
            else:
                cand[hit[1]] = 0.0
        if model.l1 > 0:
            # rounding must not flip a kinked coordinate across zero
            j = 1 + model.singles
            flip = np.sign(cand[j]) * np.sign(theta[j]) < 0
            cand[j[flip]] = 0.0
        new_obj = model.objective(cand, Q_inv)
        if new_obj >= obj - slack:
            return cand, new_obj, branch
        delta *= 0.5
    return theta.copy(), obj, "stalled"


def ascent_update(state: OptimizerState, use_fisher: bool = True, max_step: float = 2.0) -> ModelParameters:
    """Apply one edge / Fisher-scoring / optimal-gradient step to ``state``."""
    m = state.model
    Q_inv = state.frailty_precision
    obj = m.objective(state.theta, Q_inv)
    flags: list = []
    new_theta, _, _ = _take_step(m, state.theta, state.penalized_score, state.weights, Q_inv, obj,
                                 use_fisher, max_step, flags)
    return ModelParameters.from_flat(new_theta, m.p, m.T, state.frailty_cov)


def _squarem(Q0, Q1, Q2, Q3, cap=np.inf):
    """Squared extrapolation of three successive EM iterates started at ``Q0``.

    The step length is limited to ``cap`` and backtracks toward the plain EM
    iterate ``Q3`` while the extrapolated matrix loses more than 90% of the
    smallest eigenvalue of ``Q3``. Returns the new matrix and the step used
    (1 when the plain iterate is kept).
    """
    r = Q1 - Q0
    v = (Q2 - Q1) - r
    nv = np.linalg.norm(v)
    if nv == 0:
        return Q3, 1.0
    a = -min(np.linalg.norm(r) / nv, cap)
    floor = 0.1 * np.linalg.eigvalsh(Q3).min()
    while a < -1:
        Q = Q0 - 2 * a * r + a * a * v
        Q = 0.5 * (Q + Q.T)
        if np.linalg.eigvalsh(Q).min() >= floor:
            return Q, -a
        a = 0.5 * (a - 1)
    return Q3, 1.0


def _em_frailty(model: _Model, theta, w, Q_inv):
    if not model.q:
        return np.zeros((0, 0)), []
    beta = theta[model.sl_beta]
    active = np.flatnonzero(beta != 0)
    _, F_CC, F_bC, F_bb = model.blocks(active, w, theta, Q_inv)
    solver = _BlockSolver(F_CC, F_bC, F_bb)
    V = solver.random_block_cov()
    B = theta[model.sl_b].reshape(model.n, model.q)
    Q = (V.sum(axis=0) + B.T @ B) / model.n
    Q = 0.5 * (Q + Q.T)
    flags = ["inner_matrix_regularized"] if solver.flags else []
    return Q, flags


def em_update_frailty(state: OptimizerState, design: Optional[AugmentedDesign] = None) -> np.ndarray:
    """EM update ``Q = sum_i (V_ii + b_i b_i') / n``.

    ``V_ii`` is the ``b_i`` diagonal block of the inverse penalised Fisher
    matrix over ``(gamma, beta0, beta_active, b)``.
    """
    if design is not None and design is not state.design:
        state = OptimizerState.from_params(design, state.params, state.penalty, state.free)
    Q, _ = _em_frailty(state.model, state.theta, state.weights, state.frailty_precision)
    return Q


def kkt_residuals(design: AugmentedDesign, params: ModelParameters, penalty: PenaltyConfig, free=None) -> dict:
    """Optimality diagnostics for a fitted ``beta``.

    Returns the max residual over active coefficients, the max excess of
    ``|S_j|`` over ``nu * alpha`` for inactive ones (group norms for groups),
    and the stationarity residual of the smooth blocks.
    """
    model = _Model(design, penalty, free)
    theta = params.to_flat()
    lam = hazard(model.eta(theta))
    S = model.score(lam)
    Q_inv = frailty_precision(params.frailty_cov)[0] if model.q else np.zeros((0, 0))
    spen = model.penalized_score(theta, S, Q_inv)
    beta = theta[model.sl_beta]
    active_res, inactive_excess = 0.0, 0.0
    j = model.singles
    if j.size:
        act = beta[j] != 0
        if act.any():
            sj = S[1 + j[act]]
            active_res = float(np.max(np.abs(sj - model.l2 * beta[j[act]] - model.l1 * np.sign(beta[j[act]]))))
        if (~act).any():
            inactive_excess = float(np.max(np.abs(S[1 + j[~act]]) - model.l1))
    for g in model.groups:
        if np.any(beta[g] != 0):
            active_res = max(active_res, float(np.linalg.norm(spen[1 + g])))
        else:
            inactive_excess = max(inactive_excess, float(np.linalg.norm(S[1 + g]) - model.l1 * np.sqrt(g.size)))
    smooth = [abs(spen[0]), np.max(np.abs(spen[model.sl_gamma]), initial=0.0)]
    if model.q:
        smooth.append(np.max(np.abs(spen[model.sl_b])))
    return {"active": active_res, "inactive_excess": inactive_excess, "smooth": float(max(smooth))}


def _initial_theta(model: _Model, init: Optional[ModelParameters]):
    if init is None:
        rate = float(np.clip(model.y.mean(), 1e-6, 1 - 1e-6))
        theta = np.zeros(model.dim)
        theta[0] = np.log(rate / (1 - rate))
        Q = 0.1 * np.eye(model.q)
    else:
        init.check_against(model.design)
        theta = init.to_flat().copy()
        Q = init.frailty_cov.copy()
    theta[model.sl_beta][~model.free] = 0.0
    return theta, Q


def fit(design: AugmentedDesign, penalty: PenaltyConfig, init: Optional[ModelParameters] = None,
        controls: Optional[FitControls] = None, free=None) -> FitResult:
    """Maximise the penalised objective over ``theta`` with EM updates of ``Q``.

    ``free`` optionally restricts which coefficients may leave zero (used for
    the null model and post-selection refits).
    """
    controls = controls or FitControls()
    model = _Model(design, penalty, free)
    theta, Q = _initial_theta(model, init)
    update_Q = controls.update_frailty and model.q > 0
    Q_inv = frailty_precision(Q)[0] if model.q else np.zeros((0, 0))
    flags: list = []
    if model.q and frailty_precision(Q)[1]:
        flags.append("frailty_degenerate")
    obj = model.objective(theta, Q_inv)
    if not np.isfinite(obj):
        raise NumericalError("objective is not finite at the starting point")

    prev_active = None
    stable = 0
    small_change = False
    converged = False
    kkt = np.inf
    history = []
    em_trail: list = []
    sq_cap, sq_jump, sq_len = np.inf, None, 1.0
    edge_hits = np.zeros(model.p, dtype=int)
    in_fisher = False
    it = 0
    for it in range(1, controls.max_iter + 1):
        lam = hazard(model.eta(theta))
        w = lam * (1 - lam)
        S = model.score(lam)
        spen = model.penalized_score(theta, S, Q_inv)
        kkt = model.kkt(theta, S, Q_inv)
        if small_change and kkt < controls.tol_kkt:
            converged = True
            it -= 1
            break

        active = tuple(np.flatnonzero(theta[model.sl_beta] != 0))
        stable = stable + 1 if active == prev_active else 0
        prev_active = active
        # once scoring steps succeed, active-set changes they cause keep the branch enabled
        use_fisher = it > controls.fisher_after and (stable >= controls.fisher_stable or in_fisher)

        if np.any(spen != 0):
            new_theta, new_obj, branch = _take_step(model, theta, spen, w, Q_inv, obj, use_fisher,
                                                    controls.max_step, flags)
        else:
            new_theta, new_obj, branch = theta.copy(), obj, "none"
        in_fisher = branch in ("fisher", "fisher_edge")
        if new_obj < obj - 1e-10 * (1 + abs(obj)):
            raise NumericalError(f"objective decreased at iteration {it}: {obj} -> {new_obj}")
        step_norm = float(np.max(np.abs(new_theta - theta)))
        if branch == "fisher_edge":
            edge_hits += (theta[model.sl_beta] != 0) & (new_theta[model.sl_beta] == 0)
            # the EM map jumps when a coordinate joins the active set, so Q can chatter
            # across that boundary forever; hold Q inside the band and finish theta
            if update_Q and edge_hits.max() >= controls.chatter_limit:
                update_Q = False
                flags.append("frailty_chatter")
        theta = new_theta

        dQ = 0.0
        # a truncated scoring step leaves theta off the optimum for this Q, so EM waits one step
        if update_Q and branch != "fisher_edge":
            lam = hazard(model.eta(theta))
            Q_new, fl = _em_frailty(model, theta, lam * (1 - lam), Q_inv)
            flags.extend(f for f in fl if f not in flags)
            # an EM step that undoes the last extrapolation means it overshot
            if sq_jump is not None and np.sum((Q_new - Q) * sq_jump) < 0:
                sq_cap = max(1.0, 0.5 * sq_len)
            sq_jump = None
            # extrapolate only along EM maps evaluated at Newton-converged theta
            em_trail = (em_trail or [Q]) + [Q_new] if branch == "fisher" else []
            if len(em_trail) == 4 and controls.accelerate_em:
                Q_new, sq_len = _squarem(*em_trail, cap=sq_cap)
                sq_jump = Q_new - em_trail[-1] if sq_len > 1 else None
                em_trail = []
            dQ = float(np.max(np.abs(Q_new - Q)))
            Q = Q_new
            Q_inv, floored = frailty_precision(Q)
            if floored and "frailty_degenerate" not in flags:
                flags.append("frailty_degenerate")
            new_obj = model.objective(theta, Q_inv)
        if not np.isfinite(new_obj):
            raise NumericalError(f"objective diverged at iteration {it}")
        rel = abs(new_obj - obj) / (1.0 + abs(obj))
        obj = new_obj
        history.append((it, branch, obj))
        small_change = rel < controls.tol_objective and step_norm < controls.tol_step and dQ < controls.tol_frailty

    params = ModelParameters.from_flat(theta, model.p, model.T, Q)
    if not converged:
        logger.warning("fit stopped after %d iterations without convergence (kkt=%.3g)", it, kkt)
    selected = np.flatnonzero(params.coefficients != 0)
    return FitResult(params, converged, it, obj, selected, penalty, kkt, flags=flags, history=history)


def refit_selected(design: AugmentedDesign, selected, nu_baseline: float,
                   controls: Optional[FitControls] = None, init: Optional[ModelParameters] = None) -> FitResult:
    """Unpenalised refit on ``selected`` coefficients with asymptotic covariance.

    The ridge on the baseline and the frailty term stay in the objective. The
    covariance is the ``(beta0, beta_selected, gamma)`` block of the inverse
    penalised Fisher matrix with ``Q`` held at its final EM value (``b``
    integrated out through the Schur complement).
    """
    selected = np.asarray(sorted(int(j) for j in selected), dtype=int)
    free = np.zeros(design.n_features, dtype=bool)
    free[selected] = True
    penalty = PenaltyConfig(0.0, 1.0, nu_baseline)
    res = fit(design, penalty, init=init, controls=controls, free=free)
    model = _Model(design, penalty, free)
    theta = res.params.to_flat()
    lam = hazard(model.eta(theta))
    Q_inv = frailty_precision(res.params.frailty_cov)[0] if model.q else np.zeros((0, 0))
    C_index, F_CC, F_bC, F_bb = model.blocks(selected, lam * (1 - lam), theta, Q_inv)
    solver = _BlockSolver(F_CC, F_bC, F_bb)
    res.covariance = solver.schur_inverse()
    res.covariance_index = C_index
    res.selected = selected
    if selected.size and np.max(np.abs(res.params.coefficients[selected])) > SEPARATION_BOUND:
        res.flags.append("possible_separation")
    if not res.converged:
        res.flags.append("refit_not_converged")
    return res
