"""Analysis pipeline behind the command-line interface.

Covers YAML configuration, CSV input, per-imputation preprocessing, tuning
and selection, refits on the retained covariates, and Rubin pooling.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .exceptions import DataValidationError
from .optimizer import FitControls, fit, refit_selected
from .preprocess import (
    LodTable,
    McmcControls,
    apply_lod_substitution,
    binarize_nonlinear,
    fit_concomitant_stage1,
    log_offset_standardize,
    transform_stage2,
)
from .simulation import GroupSpec, SimulationDesign, run_scenario
from .survival import PenaltyConfig, augment_arrays
from .tuning import TuningGrid, grid_search

logger = logging.getLogger(__name__)

OUTCOME_COLUMNS = ("id", "time", "left", "status")
Z_975 = 1.959963984540054
CI_NOTE = ("95% intervals use the normal approximation on the log-odds scale with Rubin's pooled variance "
           "W + (1 + 1/m) B; the intercept odds ratio is exp(beta0) at standardised covariates equal to zero "
           "and the first-cycle baseline shrunk by the ridge.")

__all__ = [
    "AnalysisConfig",
    "load_config",
    "read_survival_csv",
    "preprocess_frame",
    "PooledEstimate",
    "rubin_pool",
    "format_odds_ratio",
    "selection_threshold",
    "command_fit",
    "command_preprocess",
    "command_simulate",
    "scenario_from_config",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class AnalysisConfig:
    """Settings for ``fit`` and ``preprocess``.

    ``penalty`` may fix any of ``nu``, ``alpha``, ``nu_baseline``; fixing
    ``nu`` skips tuning. ``selection_rule`` counts imputations out of
    ``selection_of`` and is scaled to the number supplied.
    """

    link: str = "logit"
    t_max: Optional[int] = None
    grid: TuningGrid = field(default_factory=TuningGrid)
    penalty: dict = field(default_factory=dict)
    lod: LodTable = field(default_factory=LodTable)
    lipid_mode: str = "covariate"
    lipid: str = "lipid"
    lipophilic: tuple = ()
    binarize: dict = field(default_factory=dict)
    selection_rule: int = 6
    selection_of: int = 10
    infertility_cycles: int = 12
    mcmc: McmcControls = field(default_factory=McmcControls)
    frailty: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.link != "logit":
            raise DataValidationError("only the logit link is supported")
        if self.lipid_mode not in ("covariate", "concomitant"):
            raise DataValidationError("lipid_mode must be 'covariate' or 'concomitant'")
        if not (1 <= self.selection_rule <= self.selection_of):
            raise DataValidationError("selection_rule must lie in 1..selection_of")
        unknown = set(self.penalty) - {"nu", "alpha", "nu_baseline"}
        if unknown:
            raise DataValidationError(f"unknown penalty overrides: {sorted(unknown)}")
        if self.t_max is not None and self.t_max < 1:
            raise DataValidationError("t_max must be positive")

    def check_columns(self, columns: Sequence[str]) -> None:
        cols = set(columns)
        wanted = set(self.binarize) | set(self.lod.limits) | set(self.lipophilic)
        if self.lipid_mode == "concomitant":
            wanted.add(self.lipid)
        missing = sorted(wanted - cols)
        if missing:
            raise DataValidationError(f"config refers to columns absent from the data: {missing}")


def _section(raw, key, cls):
    sub = raw.pop(key, None) or {}
    if not isinstance(sub, dict):
        raise DataValidationError(f"config section {key!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(sub) - names
    if unknown:
        raise DataValidationError(f"unknown keys in {key!r}: {sorted(unknown)}")
    try:
        return cls(**sub)
    except TypeError as exc:
        raise DataValidationError(str(exc)) from exc


def load_config(path=None, text: Optional[str] = None) -> AnalysisConfig:
    """Parse a YAML analysis configuration (a missing file means defaults)."""
    if text is None:
        if path is None:
            return AnalysisConfig()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise DataValidationError(f"malformed config: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataValidationError("config must be a mapping")
    raw = dict(raw)
    grid = _section(raw, "grid", TuningGrid)
    lod = _section(raw, "lod", LodTable)
    mcmc = _section(raw, "mcmc", McmcControls)
    if "lipophilic" in raw:
        raw["lipophilic"] = tuple(raw["lipophilic"] or ())
    names = {f.name for f in fields(AnalysisConfig)}
    unknown = set(raw) - names
    if unknown:
        raise DataValidationError(f"unknown config keys: {sorted(unknown)}")
    try:
        return AnalysisConfig(grid=grid, lod=lod, mcmc=mcmc, **raw)
    except TypeError as exc:
        raise DataValidationError(str(exc)) from exc


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def read_survival_csv(path) -> pd.DataFrame:
    """Read ``id, time, [left,] status, covariates...``; ``left`` defaults to 1."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    for col in ("id", "time", "status"):
        if col not in df.columns:
            raise DataValidationError(f"{path}: missing required column {col!r}")
    if "left" not in df.columns:
        df.insert(int(df.columns.get_loc("time")) + 1, "left", 1)
    df["left"] = df["left"].fillna(1)
    if df[["time", "left", "status"]].isna().any().any():
        raise DataValidationError(f"{path}: missing values in time/left/status")
    if not df["status"].isin((0, 1)).all():
        raise DataValidationError(f"{path}: status must be 0 or 1")
    covs = covariate_columns(df)
    bad = [c for c in covs if not pd.api.types.is_numeric_dtype(df[c]) or df[c].isna().any()]
    if bad:
        raise DataValidationError(f"{path}: non-numeric or missing covariate values in {bad}")
    return df


def covariate_columns(df: pd.DataFrame) -> list:
    return [c for c in df.columns if c not in OUTCOME_COLUMNS]


def _infertile(df, cycles):
    return ((df["status"].to_numpy() == 0) | (df["time"].to_numpy() > cycles)).astype(float)


def preprocess_frame(df: pd.DataFrame, config: AnalysisConfig):
    """Apply LOD, lipid handling, binarisation and log-offset standardisation.

    Returns the transformed frame and a JSON-ready report.
    """
    config.check_columns(df.columns)
    out = df[[c for c in OUTCOME_COLUMNS if c in df.columns]].copy()
    covs = covariate_columns(df)
    report = {"lod_policy": config.lod.policy, "lipid_mode": config.lipid_mode, "substitutions": {},
              "kappa": {}, "standardization": {}, "binarized": {}, "dropped": []}
    values = {}
    for c in covs:
        x, count = apply_lod_substitution(df[c].to_numpy(float), config.lod, name=c, return_count=True)
        values[c] = x
        if c in config.lod.limits:
            report["substitutions"][c] = count
    done = set()
    if config.lipid_mode == "concomitant":
        lipid = values[config.lipid]
        y = _infertile(df, config.infertility_cycles)
        for c in config.lipophilic:
            model = fit_concomitant_stage1(values[c], lipid, y, config.mcmc)
            values[c] = transform_stage2(values[c], lipid, model, name=c)
            report["kappa"][c] = {"kappa": model.kappa, "offset": model.offset,
                                  "interval": list(model.kappa_interval), "acceptance": model.acceptance,
                                  "ess": model.ess, "rhat": model.rhat, "flags": model.flags}
            done.add(c)
        report["dropped"].append(config.lipid)
        covs = [c for c in covs if c != config.lipid]
    for c, thr in config.binarize.items():
        if c in done:
            raise DataValidationError(f"{c!r} cannot be both concomitant-transformed and binarized")
        values[c] = binarize_nonlinear(values[c], float(thr))
        report["binarized"][c] = {"threshold": float(thr), "ones": int(values[c].sum())}
        done.add(c)
    for c in covs:
        if c not in done:
            values[c], mean, sd = log_offset_standardize(values[c], name=c, return_constants=True)
            report["standardization"][c] = {"mean": mean, "sd": sd}
        out[c] = values[c]
    return out, report


def _design(df, config, t_max=None):
    covs = covariate_columns(df)
    X = df[covs].to_numpy(float) if covs else np.zeros((len(df), 0))
    time = df["time"].to_numpy()
    left = df["left"].to_numpy()
    t_max = t_max or config.t_max or int(time.max())
    Z = None if config.frailty else np.zeros((int(np.sum(time - left + 1)), 0))
    return augment_arrays(X, time, left, df["status"].to_numpy(), t_max, Z,
                          subject_ids=df["id"].tolist()), covs


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

@dataclass
class PooledEstimate:
    name: str
    estimate: float
    variance: float
    within: float
    between: float
    per_imputation: list

    @property
    def ci(self):
        h = Z_975 * math.sqrt(self.variance)
        return self.estimate - h, self.estimate + h

    @property
    def odds_ratio(self):
        return math.exp(self.estimate)

    @property
    def or_ci(self):
        lo, hi = self.ci
        return math.exp(lo), math.exp(hi)

    def as_dict(self):
        lo, hi = self.or_ci
        return {"estimate": self.estimate, "variance": self.variance, "within": self.within,
                "between": self.between, "odds_ratio": self.odds_ratio, "ci_low": lo, "ci_high": hi,
                "formatted": format_odds_ratio(self.odds_ratio, lo, hi), "per_imputation": self.per_imputation}


def rubin_pool(estimates, variances, names=None) -> list:
    """Rubin's rules per column of the ``(m, k)`` estimate and variance arrays.

    Pooled estimate is the mean; pooled variance ``W + (1 + 1/m) B`` with
    ``W`` the mean within-imputation variance and ``B`` the between-imputation
    sample variance (zero when ``m = 1``).
    """
    Q = np.atleast_2d(np.asarray(estimates, dtype=float))
    U = np.atleast_2d(np.asarray(variances, dtype=float))
    if Q.shape != U.shape:
        raise DataValidationError("estimates and variances must have the same shape")
    if np.any(U < 0):
        raise DataValidationError("within-imputation variances must be nonnegative")
    m, k = Q.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    # shifted by the first imputation so identical imputations pool exactly
    dev = Q - Q[0]
    qbar = Q[0] + dev.mean(axis=0)
    W = U.mean(axis=0)
    B = dev.var(axis=0, ddof=1) if m > 1 else np.zeros(k)
    T = W + (1.0 + 1.0 / m) * B
    return [PooledEstimate(names[j], float(qbar[j]), float(T[j]), float(W[j]), float(B[j]), Q[:, j].tolist())
            for j in range(k)]


def _fmt(v):
    s = f"{v:.2f}"
    return s.rstrip("0").rstrip(".") if "." in s else s


def format_odds_ratio(or_, lo, hi) -> str:
    """``0.82 (0.7, 0.95)`` style: two decimals, trailing zeros dropped."""
    return f"{_fmt(or_)} ({_fmt(lo)}, {_fmt(hi)})"


def selection_threshold(config: AnalysisConfig, m: int) -> int:
    """``selection_rule`` of ``selection_of`` imputations, scaled to ``m`` and rounded up."""
    return max(1, math.ceil(config.selection_rule * m / config.selection_of - 1e-9))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _imputation_files(data) -> list:
    p = Path(data)
    if p.is_dir():
        files = sorted(p.glob("*.csv"))
    elif p.is_file():
        files = [p]
    else:
        raise DataValidationError(f"data path {data} does not exist")
    if not files:
        raise DataValidationError(f"no CSV files in {data}")
    return files


def _select(design, config, controls, groups=None):
    pen = config.penalty
    if pen.get("nu") is not None:
        penalty = PenaltyConfig(float(pen["nu"]), float(pen.get("alpha", 1.0)), float(pen.get("nu_baseline", 100.0)),
                                groups)
        res = fit(design, penalty, controls=controls)
        return res, {"alpha": penalty.alpha, "nu": penalty.nu, "nu_baseline": penalty.nu_baseline}
    grid = config.grid
    if pen.get("alpha") is not None:
        grid = TuningGrid((float(pen["alpha"]),), grid.nu_baselines, grid.permutations, grid.seed, grid.quantile)
    if pen.get("nu_baseline") is not None:
        grid = TuningGrid(grid.alphas, (float(pen["nu_baseline"]),), grid.permutations, grid.seed, grid.quantile)
    search = grid_search(design, grid, controls, groups=groups)
    if search.best is None:
        raise DataValidationError("no tuning-grid cell converged")
    b = search.best
    return b.result, {"alpha": b.alpha, "nu": b.nu, "nu_baseline": b.nu_baseline, "bic": b.bic,
                      "excluded_cells": len(search.excluded)}


def command_fit(data, config: AnalysisConfig, out=None, controls: Optional[FitControls] = None) -> dict:
    """Preprocess, tune and select per imputation; refit on the retained set; pool."""
    files = _imputation_files(data)
    frames = [read_survival_csv(f) for f in files]
    header, rows = list(frames[0].columns), len(frames[0])
    for f, df in zip(files, frames):
        if list(df.columns) != header:
            raise DataValidationError(f"{f.name}: header differs from {files[0].name}")
        if len(df) != rows:
            raise DataValidationError(f"{f.name}: row count differs from {files[0].name}")
    m = len(frames)
    t_max = config.t_max or int(max(df["time"].max() for df in frames))
    per = []
    counts = None
    for f, df in zip(files, frames):
        prepped, prep_report = preprocess_frame(df, config)
        design, covs = _design(prepped, config, t_max)
        res, tuning = _select(design, config, controls)
        sel = res.selected.tolist()
        if counts is None:
            counts = dict.fromkeys(covs, 0)
        for j in sel:
            counts[covs[j]] += 1
        per.append({"file": f.name, "design": design, "covariates": covs, "tuning": tuning,
                    "selected": [covs[j] for j in sel], "converged": bool(res.converged),
                    "frailty_var": res.params.frailty_cov.diagonal().tolist(), "prep": prep_report})
    covs = per[0]["covariates"]
    threshold = selection_threshold(config, m)
    retained = [c for c in covs if counts[c] >= threshold]
    if not retained:
        logger.warning("no covariate selected in >= %d of %d imputations; intercept-only report", threshold, m)
    idx = [covs.index(c) for c in retained]
    est, var = [], []
    for rec in per:
        refit = refit_selected(rec["design"], idx, rec["tuning"]["nu_baseline"], controls)
        se2 = np.diag(refit.covariance)
        # covariance order: intercept, retained coefficients, baseline
        est.append([refit.params.intercept] + [float(refit.params.coefficients[j]) for j in idx])
        var.append([se2[0]] + list(se2[1:1 + len(idx)]))
        rec["refit"] = {"converged": bool(refit.converged), "flags": list(refit.flags),
                        "frailty_var": refit.params.frailty_cov.diagonal().tolist()}
    pooled = rubin_pool(est, var, ["(Intercept)"] + retained)
    report = {
        "imputations": m,
        "selection_threshold": threshold,
        "selection_counts": counts,
        "retained": retained,
        "per_imputation": [{k: v for k, v in rec.items() if k not in ("design", "covariates")} for rec in per],
        "pooled": {p.name: p.as_dict() for p in pooled},
        "note": CI_NOTE,
    }
    if not retained:
        report["warning"] = "no covariate met the selection rule; intercept-only model reported"
    if out is not None:
        _write_json(report, out)
    return report


def command_preprocess(data, config: AnalysisConfig, out=None, report_path=None):
    df = read_survival_csv(data)
    prepped, report = preprocess_frame(df, config)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        prepped.to_csv(out, index=False, float_format="%.12g", lineterminator="\n")
    if report_path is not None:
        _write_json(report, report_path)
    return prepped, report


def scenario_from_config(raw: dict, seed: int) -> SimulationDesign:
    raw = dict(raw or {})
    kind = raw.pop("scenario", "one")
    group_type = raw.pop("group_type", "cat")
    censoring = raw.pop("censoring", raw.pop("censoring_level", 0.2))
    blocks = raw.pop("blocks", None)
    kw = {}
    if blocks is not None:
        kw["blocks"] = tuple((int(s), float(r)) for s, r in blocks)
    if "gamma" in raw:
        kw["gamma"] = tuple(float(g) for g in raw.pop("gamma"))
    if "true_beta" in raw:
        kw["true_beta"] = tuple(float(b) for b in raw.pop("true_beta"))
    allowed = {"n", "p", "frailty_sd", "truncated"}
    unknown = set(raw) - allowed - {"grid", "n_jobs"}
    if unknown:
        raise DataValidationError(f"unknown scenario keys: {sorted(unknown)}")
    kw.update({k: raw[k] for k in allowed if k in raw})
    if kind in ("one", "I", 1):
        spec = None
    elif kind in ("two", "II", 2):
        spec = GroupSpec(group_type)
    else:
        raise DataValidationError(f"unknown scenario {kind!r}")
    return SimulationDesign(censoring_level=float(censoring), group_spec=spec, seed=seed, **kw)


def command_simulate(scenario_path, replicates: int, seed: int, out, controls=None):
    try:
        raw = yaml.safe_load(Path(scenario_path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise DataValidationError(f"cannot read scenario config {scenario_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataValidationError("scenario config must be a mapping")
    design = scenario_from_config(raw, seed)
    g = raw.get("grid") or {}
    grid = TuningGrid(**{**g, "seed": g.get("seed", seed)})
    return run_scenario(design, replicates, controls, grid, out_dir=out, n_jobs=int(raw.get("n_jobs", 1)))


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2) + "\n")
