"""Benchmark data generators and selection metrics.

Scenario I: 150 covariates, two compound-symmetric blocks of three
(correlations 0.7 and 0.4), five true signals, logistic frailty hazard over
ten cycles, optional left truncation and calibrated geometric censoring.
Scenario II adds two signal groups of 4 and 3 coefficients that are either
continuous or dummy-coded categoricals.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataValidationError
from .optimizer import FitControls, FitResult, refit_selected
from .survival import SurvivalObservation, augment_arrays, hazard
from .tuning import TuningGrid, grid_search

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = (-9.00, -7.00, -4.97, -2.82, 0.34, 1.39, 2.35, 4.27, 6.18, 8.11)
SCENARIO_ONE_BETA = (-4.0, -4.0, -4.0, 8.0, 8.0)
GROUP_BETAS = ((7.0, -5.0, 7.0, -4.0), (5.0, -8.0, 3.0))
TRUNCATION_PROBS = (0.6, 0.2, 0.2)
CENSOR_FLOOR = 3
PILOT_SIZE = 50_000

__all__ = [
    "GroupSpec",
    "SimulationDesign",
    "ReplicateMetrics",
    "CensoringCalibration",
    "SimulatedData",
    "scenario_one",
    "scenario_two",
    "gen_correlated_covariates",
    "gen_group_covariates",
    "gen_covariates",
    "gen_survival_times",
    "calibrate_censoring",
    "simulate",
    "compute_metrics",
    "run_scenario",
    "summarize",
    "format_table_row",
    "write_outputs",
]


@dataclass(frozen=True)
class GroupSpec:
    kind: str = "cat"
    betas: tuple = GROUP_BETAS
    start: int = 6

    def __post_init__(self):
        if self.kind not in ("cont", "cat", "mixed"):
            raise DataValidationError("group type must be 'cont', 'cat' or 'mixed'")

    @property
    def sizes(self) -> tuple:
        return tuple(len(b) for b in self.betas)

    def indices(self) -> list:
        out, s = [], self.start
        for m in self.sizes:
            out.append(tuple(range(s, s + m)))
            s += m
        return out


@dataclass(frozen=True)
class SimulationDesign:
    n: int = 250
    p: int = 150
    true_beta: Optional[tuple] = None
    gamma: tuple = DEFAULT_GAMMA
    frailty_sd: float = 1.0
    censoring_level: float = 0.2
    truncated: bool = True
    blocks: tuple = ((3, 0.7), (3, 0.4))
    group_spec: Optional[GroupSpec] = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise DataValidationError("n and p must be positive")
        for size, rho in self.blocks:
            if size < 1 or not (0 <= rho < 1):
                raise DataValidationError("blocks need size >= 1 and correlation in [0, 1)")
        if not (0 <= self.censoring_level < 1):
            raise DataValidationError("censoring level must lie in [0, 1)")
        if sum(s for s, _ in self.blocks) > self.p:
            raise DataValidationError("blocks exceed the covariate count")

    @property
    def t_max(self) -> int:
        return len(self.gamma)

    def beta(self) -> np.ndarray:
        b = np.zeros(self.p)
        if self.true_beta is not None:
            tb = np.asarray(self.true_beta, dtype=float)
            b[:tb.size] = tb
        else:
            b[:len(SCENARIO_ONE_BETA)] = SCENARIO_ONE_BETA
        if self.group_spec is not None:
            for idx, vals in zip(self.group_spec.indices(), self.group_spec.betas):
                b[list(idx)] = vals
        return b

    def groups(self) -> Optional[tuple]:
        return None if self.group_spec is None else tuple(self.group_spec.indices())


def scenario_one(n=250, censoring=0.2, truncated=True, seed=0, **kw) -> SimulationDesign:
    return SimulationDesign(n=n, censoring_level=censoring, truncated=truncated, seed=seed, **kw)


def scenario_two(kind="cat", n=250, censoring=0.2, truncated=True, seed=0, **kw) -> SimulationDesign:
    return SimulationDesign(n=n, censoring_level=censoring, truncated=truncated, seed=seed,
                            group_spec=GroupSpec(kind), **kw)


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------

def gen_correlated_covariates(design: SimulationDesign, rng, n: Optional[int] = None) -> np.ndarray:
    """Compound-symmetric uniform blocks followed by iid U(0, 1) columns.

    A block of correlation ``rho`` shares one latent uniform scaled by
    ``sqrt(rho / (1 - rho))``.
    """
    n = design.n if n is None else n
    X = rng.uniform(size=(n, design.p))
    col = 0
    for size, rho in design.blocks:
        if not (0 <= rho < 1):
            raise DataValidationError("block correlation must lie in [0, 1)")
        shared = rng.uniform(size=n)
        X[:, col:col + size] += np.sqrt(rho / (1 - rho)) * shared[:, None]
        col += size
    return X


def _dummies(rng, n, levels):
    codes = rng.integers(0, levels, size=n)
    D = np.zeros((n, levels - 1))
    mask = codes < levels - 1
    D[np.flatnonzero(mask), codes[mask]] = 1.0
    return D


def gen_group_covariates(design: SimulationDesign, rng, n: Optional[int] = None) -> np.ndarray:
    """Columns for the grouped signals.

    Categorical groups of size ``m`` are ``m + 1``-level factors drawn
    uniformly, coded with the last level as reference.
    """
    spec = design.group_spec
    if spec is None:
        raise DataValidationError("design has no group specification")
    n = design.n if n is None else n
    kinds = {"cont": ("cont", "cont"), "cat": ("cat", "cat"), "mixed": ("cat", "cont")}[spec.kind]
    cols = []
    for m, kind in zip(spec.sizes, kinds):
        if kind == "cat":
            cols.append(_dummies(rng, n, m + 1))
        else:
            cols.append(rng.uniform(size=(n, m)))
    return np.hstack(cols)


def gen_covariates(design: SimulationDesign, rng, n: Optional[int] = None) -> np.ndarray:
    X = gen_correlated_covariates(design, rng, n)
    if design.group_spec is not None:
        G = gen_group_covariates(design, rng, n)
        s = design.group_spec.start
        X[:, s:s + G.shape[1]] = G
    return X


# ---------------------------------------------------------------------------
# event / censoring / truncation
# ---------------------------------------------------------------------------

def _event_times(X, design: SimulationDesign, rng, beta=None):
    """First cycle with a Bernoulli success; ``t_max + 1`` marks no event."""
    beta = design.beta() if beta is None else beta
    n = X.shape[0]
    r = design.frailty_sd * rng.standard_normal(n)
    eta = np.asarray(design.gamma)[None, :] + (X @ beta + r)[:, None]
    u = rng.uniform(size=eta.shape)
    hit = u < hazard(eta)
    T = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, design.t_max + 1)
    return T


def _censor_times(u, prob, t_max, truncated):
    if prob <= 0:
        C = np.full(u.shape, t_max)
    elif prob >= 1:
        C = np.ones(u.shape, dtype=int)
    else:
        C = np.ceil(np.log(u) / np.log1p(-prob)).astype(int)
        C = np.maximum(C, 1)
    C = np.minimum(C, t_max)
    if truncated:
        C = np.maximum(C, CENSOR_FLOOR)
    return C


def _truncation_times(rng, n, truncated):
    if not truncated:
        return np.ones(n, dtype=int)
    return rng.choice(np.arange(1, 4), size=n, p=TRUNCATION_PROBS)


@dataclass
class CensoringCalibration:
    probability: float
    achieved: float
    target: float
    feasible: bool


def calibrate_censoring(design: SimulationDesign, rng=None, pilot: int = PILOT_SIZE,
                        tol: float = 0.02) -> CensoringCalibration:
    """Per-cycle geometric censoring probability hitting the target censored share.

    Uses a fixed pilot sample (common random numbers) so the censored share
    is monotone in the probability; bisection then brackets the target.
    """
    rng = np.random.default_rng(design.seed) if rng is None else rng
    X = gen_covariates(design, rng, pilot)
    T = _event_times(X, design, rng)
    L = _truncation_times(rng, pilot, design.truncated)
    keep = T >= L
    T = T[keep]
    u = rng.uniform(size=T.size)

    def share(prob):
        C = _censor_times(u, prob, design.t_max, design.truncated)
        return float(np.mean(T > C))

    target = design.censoring_level
    lo_share = share(0.0)
    if target <= lo_share:
        return CensoringCalibration(0.0, lo_share, target, lo_share - target <= tol or target == 0)
    hi_share = share(1.0)
    if target > hi_share:
        return CensoringCalibration(1.0, hi_share, target, hi_share >= target - tol)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if share(mid) < target:
            lo = mid
        else:
            hi = mid
    prob = 0.5 * (lo + hi)
    achieved = share(prob)
    return CensoringCalibration(prob, achieved, target, abs(achieved - target) <= tol)


@dataclass
class SimulatedData:
    X: np.ndarray
    time: np.ndarray
    truncation: np.ndarray
    event: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    truncation_draws: np.ndarray
    discard_fraction: float
    t_max: int

    def design(self, frailty: bool = True):
        Z = None if frailty else np.zeros((int(np.sum(self.time - self.truncation + 1)), 0))
        return augment_arrays(self.X, self.time, self.truncation, self.event, self.t_max, Z)

    def records(self) -> list:
        return [SurvivalObservation(i, int(t), int(l), bool(d), x)
                for i, (t, l, d, x) in enumerate(zip(self.time, self.truncation, self.event, self.X))]

    @property
    def censored_fraction(self) -> float:
        return float(1 - self.event.mean())

    @property
    def late_entry_fraction(self) -> float:
        return float(np.mean(self.truncation > 1))


def gen_survival_times(covariates, design: SimulationDesign, rng, censor_prob: float,
                       covariate_source=None) -> SimulatedData:
    """Event, censoring and truncation draws for the given covariates.

    Subjects whose event precedes their entry cycle are discarded and
    replaced (with fresh covariates from ``covariate_source``) until
    ``len(covariates)`` subjects are retained.
    """
    X = np.asarray(covariates, dtype=float)
    n = X.shape[0]
    source = covariate_source or (lambda m: gen_covariates(design, rng, m))
    kept_X, kept_T, kept_C, kept_L = [], [], [], []
    drawn, retained, all_L = 0, 0, []
    batch = X
    while retained < n:
        T = _event_times(batch, design, rng)
        L = _truncation_times(rng, batch.shape[0], design.truncated)
        C = _censor_times(rng.uniform(size=batch.shape[0]), censor_prob, design.t_max, design.truncated)
        all_L.append(L)
        keep = np.flatnonzero(T >= L)[: n - retained]
        drawn += batch.shape[0] if retained + np.count_nonzero(T >= L) < n else int(
            np.searchsorted(np.cumsum(T >= L), n - retained) + 1)
        kept_X.append(batch[keep]); kept_T.append(T[keep]); kept_C.append(C[keep]); kept_L.append(L[keep])
        retained += keep.size
        if retained < n:
            batch = source(max(n - retained, 16))
    X = np.vstack(kept_X)
    T = np.concatenate(kept_T)
    C = np.concatenate(kept_C)
    L = np.concatenate(kept_L)
    event = T <= C
    time = np.minimum(T, C)
    return SimulatedData(X, time, L, event.astype(int), T, C, np.concatenate(all_L),
                         1.0 - n / drawn, design.t_max)


def simulate(design: SimulationDesign, rng, censor_prob: float) -> SimulatedData:
    X = gen_covariates(design, rng)
    return gen_survival_times(X, design, rng, censor_prob)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class ReplicateMetrics:
    fn: int
    fp: int
    sq_err: float
    ng_fn: int
    group_captured: tuple = ()

    def as_row(self) -> dict:
        row = {"fn": self.fn, "fp": self.fp, "sq_err": self.sq_err, "ng_fn": self.ng_fn}
        for k, g in enumerate(self.group_captured, start=1):
            row[f"grp{k}"] = int(g)
        return row


def compute_metrics(fit_or_beta, design: SimulationDesign) -> ReplicateMetrics:
    """FN / FP / squared error against the design's true coefficients.

    Dummy columns count as separate variables; ``ng_fn`` only looks at true
    signals outside the groups; a group is captured when all its members
    are nonzero.
    """
    beta_hat = fit_or_beta.params.coefficients if isinstance(fit_or_beta, FitResult) else np.asarray(fit_or_beta)
    truth = design.beta()
    sel = beta_hat != 0
    true = truth != 0
    fn = int(np.sum(true & ~sel))
    fp = int(np.sum(~true & sel))
    sq_err = float(np.sum((beta_hat - truth) ** 2))
    group_idx = design.group_spec.indices() if design.group_spec is not None else []
    in_group = np.zeros(truth.size, dtype=bool)
    for g in group_idx:
        in_group[list(g)] = True
    ng_fn = int(np.sum(true & ~sel & ~in_group))
    captured = tuple(bool(np.all(sel[list(g)])) for g in group_idx)
    return ReplicateMetrics(fn, fp, sq_err, ng_fn, captured)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _replicate(design, calib, r, child, grid, controls):
    rng = np.random.default_rng(child)
    data = simulate(design, rng, calib.probability)
    dm = data.design()
    search = grid_search(dm, grid, controls, groups=design.groups())
    row = {"replicate": r, "censored": data.censored_fraction, "late_entry": data.late_entry_fraction,
           "discarded": data.discard_fraction}
    if search.best is None:
        raise RuntimeError("no grid cell converged")
    best = search.best
    row.update({"alpha": best.alpha, "nu_baseline": best.nu_baseline, "nu": best.nu,
                "frailty_var": float(best.result.params.frailty_cov[0, 0]) if dm.n_random else 0.0})
    row.update(compute_metrics(best.result, design).as_row())
    refit = refit_selected(dm, best.result.selected, best.nu_baseline, controls, init=best.result.params)
    row["sq_err_penalized"] = row["sq_err"]
    row["sq_err"] = compute_metrics(refit.params.coefficients, design).sq_err
    return row


def run_scenario(design: SimulationDesign, replicates: int, controls: Optional[FitControls] = None,
                 grid: Optional[TuningGrid] = None, out_dir=None, n_jobs: int = 1,
                 calibration: Optional[CensoringCalibration] = None):
    """Generate, tune, fit and score ``replicates`` data sets.

    Replicate ``r`` draws from the ``r``-th child of the design seed, so its
    stream does not depend on execution order. Failed replicates are logged,
    counted and left out of the summary.
    """
    if replicates < 1:
        raise DataValidationError("replicates must be >= 1")
    grid = grid or TuningGrid(seed=design.seed)
    root = np.random.SeedSequence(design.seed)
    calib_seq, rep_seq = root.spawn(2)
    if calibration is None:
        calibration = calibrate_censoring(design, np.random.default_rng(calib_seq))
    if not calibration.feasible:
        logger.warning("censoring target %.2f not reachable (achieved %.3f)", calibration.target, calibration.achieved)
    children = rep_seq.spawn(replicates)
    jobs = [(design, calibration, r, children[r], grid, controls) for r in range(replicates)]
    if n_jobs != 1:
        from joblib import Parallel, delayed
        outs = Parallel(n_jobs=n_jobs)(delayed(_safe_replicate)(*j) for j in jobs)
    else:
        outs = [_safe_replicate(*j) for j in jobs]
    rows = [o for o in outs if isinstance(o, dict)]
    failures = [o for o in outs if not isinstance(o, dict)]
    summary = summarize(rows, design, calibration, len(failures))
    if out_dir is not None:
        write_outputs(rows, summary, out_dir)
    return rows, summary


def _safe_replicate(*args):
    try:
        return _replicate(*args)
    except Exception as exc:  # a failed replicate must not sink the run
        logger.error("replicate %s failed: %s", args[2], exc)
        return exc


def summarize(rows: Sequence[dict], design: SimulationDesign, calibration: Optional[CensoringCalibration] = None,
              failures: int = 0) -> dict:
    """Table-style summary: mean (sd) of FN/FP/NG_FN, median (sd) of sq_err, capture %."""
    out = {"n": design.n, "p": design.p, "type": design.group_spec.kind if design.group_spec else "",
           "target_cn": design.censoring_level, "truncated": int(design.truncated),
           "replicates": len(rows), "failures": failures}
    if calibration is not None:
        out["censor_prob"] = calibration.probability
        out["pilot_cn"] = calibration.achieved
    if not rows:
        return out
    col = lambda k: np.array([r[k] for r in rows], dtype=float)  # noqa: E731
    sd = lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0  # noqa: E731
    out["cn"] = float(col("censored").mean())
    out["tr"] = float(col("late_entry").mean())
    out["discarded"] = float(col("discarded").mean())
    for k in ("fn", "fp", "ng_fn"):
        out[f"{k}_mean"] = float(col(k).mean())
        out[f"{k}_sd"] = sd(col(k))
    out["sq_err_median"] = float(np.median(col("sq_err")))
    out["sq_err_sd"] = sd(col("sq_err"))
    k = 1
    while f"grp{k}" in rows[0]:
        out[f"grp{k}_pct"] = 100.0 * float(col(f"grp{k}").mean())
        k += 1
    return out


REPLICATE_COLUMNS = ("replicate", "fn", "fp", "sq_err", "ng_fn", "grp1", "grp2", "sq_err_penalized", "censored",
                     "late_entry", "discarded",
                     "alpha", "nu_baseline", "nu", "frailty_var")


def write_outputs(rows, summary, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = [c for c in REPLICATE_COLUMNS if rows and c in rows[0]]
    with open(out / "replicates.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary), lineterminator="\n")
        w.writeheader()
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in summary.items()})
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head, vals = format_table_row(summary)
        w.writerow(head)
        w.writerow(vals)


def format_table_row(summary: dict):
    """Render a summary in the ``mean (sd)`` layout of the published tables."""
    head = ["n", "Cn", "Tr", "FN", "FP", "Med_SE"]
    if not summary.get("replicates"):
        return head, [summary["n"], "", "", "", "", ""]
    vals = [str(summary["n"]), f"{summary['cn']:.2f}", f"{summary['tr']:.2f}",
            f"{summary['fn_mean']:.2f} ({summary['fn_sd']:.2f})",
            f"{summary['fp_mean']:.2f} ({summary['fp_sd']:.2f})",
            f"{summary['sq_err_median']:.2f} ({summary['sq_err_sd']:.2f})"]
    if summary.get("type"):
        head = ["Type"] + head + ["NG_FN", "GRP1", "GRP2"]
        vals = [summary["type"]] + vals + [f"{summary['ng_fn_mean']:.2f} ({summary['ng_fn_sd']:.2f})",
                                           f"{summary.get('grp1_pct', 0):.2f}%", f"{summary.get('grp2_pct', 0):.2f}%"]
    return head, vals
