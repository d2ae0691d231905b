import filecmp
import json
import shutil

import numpy as np
import pandas as pd
import pytest

import discnet.cli as cli
from conftest import concomitant_data, write_imputations
from discnet.exceptions import DataValidationError, NumericalError
from discnet.pipeline import (
    AnalysisConfig,
    command_fit,
    command_preprocess,
    format_odds_ratio,
    load_config,
    preprocess_frame,
    read_survival_csv,
    rubin_pool,
    selection_threshold,
)
from discnet.preprocess import boxcox_generalized, log_offset_standardize

FAST_FIT = "penalty:\n  nu: 8.0\n  alpha: 1.0\n  nu_baseline: 15.0\n"


# ---------------------------------------------------------------------------
# Rubin pooling
# ---------------------------------------------------------------------------

def test_rubin_identical_imputations():
    pooled = rubin_pool([[0.3, -1.0]] * 4, [[0.02, 0.5]] * 4, ["a", "b"])
    for p, w in zip(pooled, (0.02, 0.5)):
        assert p.between == 0.0
        assert p.variance == pytest.approx(w, abs=1e-15)


def test_rubin_three_imputation_fixture():
    est = [[1.0, 0.5], [2.0, 0.5], [3.0, 2.0]]
    var = [[0.1, 1.0], [0.2, 2.0], [0.3, 3.0]]
    a, b = rubin_pool(est, var)
    assert a.estimate == 2.0 and a.within == pytest.approx(0.2) and a.between == pytest.approx(1.0)
    assert a.variance == pytest.approx(0.2 + (4 / 3) * 1.0, abs=1e-15)
    assert b.estimate == 1.0 and b.between == pytest.approx(0.75)
    assert b.variance == pytest.approx(2.0 + (4 / 3) * 0.75, abs=1e-15)


def test_rubin_single_imputation_is_within_variance():
    (p,) = rubin_pool([[0.7]], [[0.04]])
    assert p.variance == 0.04 and p.between == 0.0


def test_pooled_interval_is_normal_on_log_odds():
    (p,) = rubin_pool([[0.2], [0.4]], [[0.01], [0.01]])
    lo, hi = p.ci
    assert p.estimate == pytest.approx(0.3)
    assert hi - p.estimate == pytest.approx(1.959963984540054 * np.sqrt(0.01 + 1.5 * 0.02))
    assert p.or_ci == pytest.approx((np.exp(lo), np.exp(hi)))


def test_rubin_shape_checks():
    with pytest.raises(DataValidationError):
        rubin_pool([[1.0, 2.0]], [[0.1]])
    with pytest.raises(DataValidationError):
        rubin_pool([[1.0]], [[-0.1]])


def test_odds_ratio_format():
    assert format_odds_ratio(0.82, 0.70, 0.95) == "0.82 (0.7, 0.95)"
    assert format_odds_ratio(1.0, 0.5, 2.0) == "1 (0.5, 2)"


@pytest.mark.parametrize("m, expected", [(10, 6), (1, 1), (5, 3), (20, 12)])
def test_selection_threshold_scales(m, expected):
    assert selection_threshold(AnalysisConfig(), m) == expected


# ---------------------------------------------------------------------------
# configuration and input
# ---------------------------------------------------------------------------

def test_load_config_sections():
    cfg = load_config(text="""
t_max: 12
grid: {alphas: [1.0, 0.5], nu_baselines: [100], permutations: 10}
lod: {policy: WL, limits: {chem1: 0.5}}
binarize: {chem2: 1.0}
selection_rule: 6
""")
    assert cfg.t_max == 12 and cfg.grid.alphas == (1.0, 0.5) and cfg.grid.nu_baselines == (100.0,)
    assert cfg.lod.policy == "WL" and cfg.lod.limits == {"chem1": 0.5}
    assert cfg.binarize == {"chem2": 1.0}
    assert load_config() == AnalysisConfig()


@pytest.mark.parametrize("text", ["bogus: 1", "grid: {alpha: [1]}", "lipid_mode: both", "link: probit",
                                  "penalty: {lambda: 1}", "- a\n- b", "selection_rule: 11", "t_max: [1"])
def test_load_config_rejects(text):
    with pytest.raises(DataValidationError):
        load_config(text=text)


def test_read_csv_defaults_left(tmp_path):
    p = tmp_path / "a.csv"
    pd.DataFrame({"id": [1, 2], "time": [3, 4], "status": [1, 0], "x": [0.1, 0.2]}).to_csv(p, index=False)
    df = read_survival_csv(p)
    assert list(df.columns) == ["id", "time", "left", "status", "x"]
    assert df["left"].tolist() == [1, 1]


@pytest.mark.parametrize("frame", [
    {"id": [1], "time": [3]},
    {"id": [1], "time": [3], "status": [2]},
    {"id": [1], "time": [3], "status": [1], "x": ["a"]},
])
def test_read_csv_rejects(tmp_path, frame):
    p = tmp_path / "a.csv"
    pd.DataFrame(frame).to_csv(p, index=False)
    with pytest.raises(DataValidationError):
        read_survival_csv(p)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _raw_frame(rng, n=60):
    return pd.DataFrame({"id": np.arange(n), "time": rng.integers(1, 8, n), "left": 1,
                         "status": rng.integers(0, 2, n), "chem1": rng.lognormal(size=n),
                         "chem2": rng.lognormal(size=n), "lipid": rng.lognormal(size=n)})


def test_covariate_mode_is_plain_log_offset_standardization(rng):
    df = _raw_frame(rng)
    out, report = preprocess_frame(df, AnalysisConfig())
    for c in ("chem1", "chem2", "lipid"):
        assert np.allclose(out[c], log_offset_standardize(df[c]), atol=1e-14)
    assert out[["id", "time", "left", "status"]].equals(df[["id", "time", "left", "status"]])
    assert set(report["standardization"]) == {"chem1", "chem2", "lipid"}


def test_wl_above_lod_equals_wol(rng):
    df = _raw_frame(rng)
    low = float(df["chem1"].min()) / 2
    wl, rep = preprocess_frame(df, AnalysisConfig(lod=load_config(
        text=f"lod: {{policy: WL, limits: {{chem1: {low}}}}}").lod))
    wol, _ = preprocess_frame(df, AnalysisConfig())
    assert wl.equals(wol) and rep["substitutions"] == {"chem1": 0}


def test_lod_applied_on_raw_scale_before_log(rng):
    df = _raw_frame(rng)
    lod = float(np.quantile(df["chem1"], 0.3))
    cfg = load_config(text=f"lod: {{policy: WL, limits: {{chem1: {lod}}}}}")
    out, rep = preprocess_frame(df, cfg)
    raw = df["chem1"].to_numpy().copy()
    raw[raw < lod] = lod / np.sqrt(2)
    assert np.allclose(out["chem1"], log_offset_standardize(raw), atol=1e-14)
    assert rep["substitutions"]["chem1"] == int(np.sum(df["chem1"] < lod))


def test_binarized_column_skips_standardization(rng):
    df = _raw_frame(rng)
    out, rep = preprocess_frame(df, AnalysisConfig(binarize={"chem2": 1.0}))
    assert out["chem2"].tolist() == (df["chem2"] > 1.0).astype(float).tolist()
    assert "chem2" not in rep["standardization"]


def test_covariates_do_not_depend_on_outcome(rng):
    df = _raw_frame(rng)
    shuffled = df.copy()
    shuffled[["time", "status"]] = df[["time", "status"]].to_numpy()[rng.permutation(len(df))]
    a, _ = preprocess_frame(df, AnalysisConfig())
    b, _ = preprocess_frame(shuffled, AnalysisConfig())
    assert a[["chem1", "chem2", "lipid"]].equals(b[["chem1", "chem2", "lipid"]])


def test_missing_config_column_rejected(rng):
    with pytest.raises(DataValidationError, match="chem9"):
        preprocess_frame(_raw_frame(rng), AnalysisConfig(binarize={"chem9": 1.0}))


def _concomitant_csv(path, n=1500, seed=4):
    x, s, y = concomitant_data(0.0, seed, n=n)
    rng = np.random.default_rng(seed)
    time = np.where(y == 1, 12, rng.integers(1, 13, n))
    pd.DataFrame({"id": np.arange(n), "time": time, "left": 1, "status": (1 - y).astype(int),
                  "chem1": x, "chem2": rng.lognormal(size=n), "lipid": s}).to_csv(path, index=False)
    return x, s


CONCOMITANT = """
lipid_mode: concomitant
lipophilic: [chem1]
mcmc: {chains: 2, iterations: 2000, burn_in: 1000, seed: 1}
"""


def test_concomitant_mode_tracks_oracle_transform(tmp_path):
    x, s = _concomitant_csv(tmp_path / "raw.csv")
    out, rep = command_preprocess(tmp_path / "raw.csv", load_config(text=CONCOMITANT))
    g = boxcox_generalized(x, s, 0.0)
    oracle = (g - g.mean()) / g.std(ddof=1)
    assert np.corrcoef(out["chem1"], oracle)[0, 1] > 0.95
    assert "lipid" not in out.columns and rep["dropped"] == ["lipid"]
    assert abs(rep["kappa"]["chem1"]["kappa"]) < 0.5
    assert abs(out["chem1"].mean()) < 1e-12 and out["chem1"].var(ddof=1) == pytest.approx(1.0)


def test_preprocess_cli_is_byte_identical(tmp_path):
    _concomitant_csv(tmp_path / "raw.csv", n=400)
    (tmp_path / "cfg.yaml").write_text(CONCOMITANT)
    for k in ("a", "b"):
        code = cli.main(["preprocess", "--data", str(tmp_path / "raw.csv"), "--config", str(tmp_path / "cfg.yaml"),
                         "--out", str(tmp_path / f"{k}.csv"), "--report", str(tmp_path / f"{k}.json")])
        assert code == 0
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    assert filecmp.cmp(tmp_path / "a.json", tmp_path / "b.json", shallow=False)
    assert "kappa" in json.loads((tmp_path / "a.json").read_text())


# ---------------------------------------------------------------------------
# fit command
# ---------------------------------------------------------------------------

def test_identical_imputations_have_zero_between_variance(tmp_path):
    (src,) = write_imputations(tmp_path, m=1, n=200, p=4, beta=1.0)
    d = tmp_path / "imps"
    d.mkdir()
    for k in range(3):
        shutil.copy(src, d / f"imp{k}.csv")
    rep = command_fit(d, load_config(text=FAST_FIT))
    assert rep["retained"]
    for p in rep["pooled"].values():
        assert p["between"] == 0.0
        assert p["variance"] == pytest.approx(p["within"], rel=1e-15)


def test_single_imputation_selects_once(tmp_path):
    (src,) = write_imputations(tmp_path, m=1, n=200, p=4, beta=1.0)
    rep = command_fit(src, load_config(text=FAST_FIT))
    assert rep["imputations"] == 1 and rep["selection_threshold"] == 1
    assert set(rep["retained"]) == {c for c, k in rep["selection_counts"].items() if k >= 1}
    for p in rep["pooled"].values():
        assert p["variance"] == p["within"]


def test_nothing_selected_gives_intercept_only(tmp_path):
    (src,) = write_imputations(tmp_path, m=1, n=150, p=3, beta=0.0)
    rep = command_fit(src, load_config(text="penalty: {nu: 1000.0, nu_baseline: 15.0}"))
    assert rep["retained"] == [] and "warning" in rep
    assert list(rep["pooled"]) == ["(Intercept)"]


def test_header_mismatch_rejected(tmp_path):
    a, b = write_imputations(tmp_path, m=2, n=100, p=3)
    df = pd.read_csv(b).rename(columns={"chem3": "chemX"})
    df.to_csv(b, index=False)
    with pytest.raises(DataValidationError, match="header"):
        command_fit(tmp_path, load_config(text=FAST_FIT))


def test_fit_cli_rerun_is_byte_identical(tmp_path):
    write_imputations(tmp_path, m=2, n=150, p=4, beta=1.0)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("grid: {alphas: [1.0, 0.7], nu_baselines: [15], permutations: 5}\n")
    for k in ("a", "b"):
        assert cli.main(["fit", "--data", str(tmp_path), "--config", str(cfg), "--out", str(tmp_path / f"{k}.json")]) == 0
    assert filecmp.cmp(tmp_path / "a.json", tmp_path / "b.json", shallow=False)
    rep = json.loads((tmp_path / "a.json").read_text())
    assert {"selection_counts", "retained", "per_imputation", "pooled", "note"} <= set(rep)


def test_end_to_end_planted_signal(tmp_path):
    write_imputations(tmp_path, m=10, n=400, p=8, beta=0.5, seed=0)
    rep = command_fit(tmp_path, AnalysisConfig())
    assert rep["selection_counts"]["chem1"] >= 6
    assert "chem1" in rep["retained"]
    chem1 = rep["pooled"]["chem1"]
    assert chem1["ci_low"] > 1.0


# ---------------------------------------------------------------------------
# CLI surface
# ---------------------------------------------------------------------------

def test_cli_missing_data_is_validation_error(tmp_path, capsys):
    assert cli.main(["fit", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_bad_config_is_validation_error(tmp_path):
    write_imputations(tmp_path, m=1, n=50, p=2)
    cfg = tmp_path / "c.yaml"
    cfg.write_text("nonsense_key: 3\n")
    assert cli.main(["fit", "--data", str(tmp_path), "--config", str(cfg), "--out", str(tmp_path / "r.json")]) == 2


def test_cli_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("nonpositive curvature")
    monkeypatch.setattr(cli, "command_fit", boom)
    assert cli.main(["fit", "--data", str(tmp_path), "--out", str(tmp_path / "r.json")]) == 3


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])


SCENARIO = """scenario: one
n: 250
censoring: 0.2
truncated: true
"""


def test_simulate_cli_smoke_and_rerun(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text(SCENARIO)
    for k in ("a", "b"):
        assert cli.main(["simulate", "--scenario", str(cfg), "--replicates", "25", "--seed", "3",
                         "--out", str(tmp_path / k)]) == 0
    for f in ("replicates.csv", "summary.csv", "table.csv"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
    summary = pd.read_csv(tmp_path / "a" / "summary.csv")
    for col in ("n", "cn", "tr", "fn_mean", "fn_sd", "fp_mean", "fp_sd", "sq_err_median", "sq_err_sd",
                "replicates", "failures"):
        assert col in summary.columns
    assert int(summary["replicates"][0]) == 25
    reps = pd.read_csv(tmp_path / "a" / "replicates.csv")
    assert list(reps.columns[:5]) == ["replicate", "fn", "fp", "sq_err", "ng_fn"]


def test_simulate_cli_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("scenario: one\nwidgets: 3\n")
    assert cli.main(["simulate", "--scenario", str(cfg), "--replicates", "1", "--out", str(tmp_path / "o")]) == 2
