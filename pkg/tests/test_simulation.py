import csv
import filecmp

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy import special, stats

import discnet.simulation as sim
from discnet.exceptions import DataValidationError
from discnet.simulation import (
    PILOT_SIZE,
    GroupSpec,
    SimulationDesign,
    calibrate_censoring,
    compute_metrics,
    format_table_row,
    gen_correlated_covariates,
    gen_group_covariates,
    gen_survival_times,
    run_scenario,
    scenario_one,
    scenario_two,
    simulate,
)
from discnet.tuning import TuningGrid


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------

def test_zero_correlation_block_is_iid():
    d = SimulationDesign(n=20000, blocks=((3, 0.0),))
    X = gen_correlated_covariates(d, np.random.default_rng(0))
    C = np.corrcoef(X[:, :3].T)
    assert np.max(np.abs(C[np.triu_indices(3, 1)])) < 0.03


def test_block_correlation_monte_carlo():
    d = SimulationDesign(n=100_000, blocks=((3, 0.7), (3, 0.4)))
    X = gen_correlated_covariates(d, np.random.default_rng(1))
    for cols, rho in (((0, 1, 2), 0.7), ((3, 4, 5), 0.4)):
        C = np.corrcoef(X[:, cols].T)
        assert np.allclose(C[np.triu_indices(3, 1)], rho, atol=0.02)
    assert abs(np.corrcoef(X[:, 0], X[:, 3])[0, 1]) < 0.02
    assert X[:, 6:].min() >= 0 and X[:, 6:].max() < 1


def test_half_correlation_gives_triangular_marginal():
    d = SimulationDesign(n=20000, blocks=((2, 0.5),))
    X = gen_correlated_covariates(d, np.random.default_rng(2))
    assert 0 <= X[:, 0].min() and X[:, 0].max() <= 2
    assert stats.kstest(X[:, 0], stats.triang(c=0.5, loc=0, scale=2).cdf).pvalue > 0.01


@pytest.mark.parametrize("blocks", [((3, 1.0),), ((3, -0.1),), ((0, 0.5),), ((200, 0.5),)])
def test_invalid_blocks_rejected(blocks):
    with pytest.raises(DataValidationError):
        SimulationDesign(blocks=blocks)


def test_categorical_dummies():
    d = scenario_two("cat", n=50_000)
    G = gen_group_covariates(d, np.random.default_rng(3))
    assert G.shape[1] == 7
    assert set(np.unique(G)) <= {0.0, 1.0}
    first, second = G[:, :4], G[:, 4:]
    assert first.sum(axis=1).max() <= 1 and second.sum(axis=1).max() <= 1
    se5, se4 = np.sqrt(0.2 * 0.8 / 50_000), np.sqrt(0.25 * 0.75 / 50_000)
    assert np.all(np.abs(first.mean(axis=0) - 0.2) < 4 * se5)
    assert np.all(np.abs(second.mean(axis=0) - 0.25) < 4 * se4)


def test_continuous_and_mixed_groups():
    G = gen_group_covariates(scenario_two("cont", n=1000), np.random.default_rng(4))
    assert np.all((G > 0) & (G < 1))
    M = gen_group_covariates(scenario_two("mixed", n=1000), np.random.default_rng(4))
    assert set(np.unique(M[:, :4])) <= {0.0, 1.0}
    assert len(np.unique(M[:, 4:])) > 100
    with pytest.raises(DataValidationError):
        GroupSpec("ordinal")


# ---------------------------------------------------------------------------
# event times
# ---------------------------------------------------------------------------

def test_flat_hazard_is_geometric_half():
    d = SimulationDesign(n=100_000, gamma=(0.0,) * 10, true_beta=(0.0,), frailty_sd=0.0, truncated=False)
    data = gen_survival_times(np.zeros((100_000, d.p)), d, np.random.default_rng(5), 0.0)
    p1 = np.mean((data.time == 1) & (data.event == 1))
    assert abs(p1 - 0.5) < 3 * np.sqrt(0.25 / 100_000)


def _check_hazard(data, oracle, min_risk=50):
    """Empirical hazard within 3 binomial standard errors of ``oracle`` wherever the risk set is sizeable."""
    checked = 0
    for t, lam in enumerate(oracle, start=1):
        risk = np.count_nonzero(data.time >= t)
        if risk < min_risk:
            continue
        ev = np.count_nonzero((data.time == t) & (data.event == 1))
        assert abs(ev / risk - lam) < 3 * np.sqrt(lam * (1 - lam) / risk) + 1e-12, t
        checked += 1
    assert checked >= 8


def test_marginal_hazard_without_frailty():
    d = SimulationDesign(n=100_000, true_beta=(0.0,), frailty_sd=0.0, truncated=False)
    data = simulate(d, np.random.default_rng(6), 0.0)
    _check_hazard(data, special.expit(np.array(d.gamma)))


def test_marginal_hazard_averaged_over_frailty():
    d = SimulationDesign(n=100_000, true_beta=(0.0,), truncated=False)
    data = simulate(d, np.random.default_rng(7), 0.0)
    r, w = hermegauss(80)
    w = w / w.sum()
    lam = special.expit(np.array(d.gamma)[:, None] + r[None, :])
    surv = np.vstack([np.ones_like(r), np.cumprod(1 - lam, axis=0)[:-1]])
    oracle = (w * surv * lam).sum(axis=1) / (w * surv).sum(axis=1)
    _check_hazard(data, oracle)


def test_truncation_draws_and_consistency():
    d = scenario_one(n=20_000)
    data = simulate(d, np.random.default_rng(8), 0.05)
    freq = np.bincount(data.truncation_draws, minlength=4)[1:] / data.truncation_draws.size
    se = np.sqrt(np.array([0.6, 0.2, 0.2]) * np.array([0.4, 0.8, 0.8]) / data.truncation_draws.size)
    assert np.all(np.abs(freq - [0.6, 0.2, 0.2]) < 3 * se)
    assert data.X.shape[0] == 20_000
    assert np.all(data.event_time >= data.truncation)
    assert np.array_equal(data.time, np.minimum(data.event_time, data.censor_time))
    assert np.array_equal(data.event == 0, data.event_time > data.censor_time)
    assert np.all(data.censor_time >= data.truncation)
    assert 0 < data.discard_fraction < 0.2


def test_late_entry_share_matches_reported_truncation_column():
    # reported Tr for the (n=250, Cn 0.21) truncated row is 0.34
    d = scenario_one(n=20_000, censoring=0.2)
    cal = calibrate_censoring(d, np.random.default_rng(0))
    data = simulate(d, np.random.default_rng(9), cal.probability)
    assert abs(data.late_entry_fraction - 0.34) <= 0.03


# ---------------------------------------------------------------------------
# censoring calibration
# ---------------------------------------------------------------------------

def test_target_zero_is_administrative_only():
    d = scenario_one(censoring=0.0)
    cal = calibrate_censoring(d, np.random.default_rng(0))
    assert cal.probability == 0.0
    data = simulate(scenario_one(n=20_000, censoring=0.0), np.random.default_rng(1), 0.0)
    assert np.all(data.censor_time == 10)
    past = np.mean(data.event_time > 10)
    assert abs(cal.achieved - past) < 3 * np.sqrt(past * (1 - past) / PILOT_SIZE) + 3 * np.sqrt(past / 20_000)


def test_target_point_two_on_pilot():
    cal = calibrate_censoring(scenario_one(censoring=0.2), np.random.default_rng(3))
    assert 0.18 <= cal.achieved <= 0.22 and cal.feasible


@pytest.mark.parametrize("target, reported", [(0.2, 0.21), (0.35, 0.36), (0.5, 0.50)])
def test_achieved_censoring_matches_reported(target, reported):
    d = scenario_one(n=20_000, censoring=target)
    cal = calibrate_censoring(d, np.random.default_rng(0))
    data = simulate(d, np.random.default_rng(10), cal.probability)
    assert abs(data.censored_fraction - reported) <= 0.03


def test_infeasible_target_flagged():
    d = SimulationDesign(gamma=(5.0,) * 3, censoring_level=0.95, truncated=True, true_beta=(0.0,))
    assert not calibrate_censoring(d, np.random.default_rng(0), pilot=2000).feasible


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_example():
    d = scenario_one()
    beta = np.zeros(150)
    beta[[0, 1, 2, 3, 5]] = 1.0
    m = compute_metrics(beta, d)
    assert (m.fn, m.fp) == (1, 1)


def test_metrics_perfect():
    d = scenario_two("cat")
    m = compute_metrics(d.beta(), d)
    assert (m.fn, m.fp, m.sq_err, m.ng_fn) == (0, 0, 0.0, 0)
    assert m.group_captured == (True, True)


def test_metric_identities(rng):
    d = scenario_two("mixed")
    for _ in range(20):
        beta = d.beta() * (rng.uniform(size=150) < 0.7) + rng.normal(size=150) * (rng.uniform(size=150) < 0.05)
        m = compute_metrics(beta, d)
        support = np.flatnonzero(d.beta())
        tp = np.count_nonzero(beta[support])
        assert m.fn + tp == support.size
        assert m.ng_fn == np.count_nonzero(beta[:5] == 0)
        assert m.fp <= 150 - support.size
        assert m.group_captured[0] == bool(np.all(beta[6:10] != 0))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

SMALL = dict(n=80, p=20, censoring_level=0.2)
SMALL_GRID = TuningGrid((1.0, 0.7), (15.0,), permutations=5)


def _small(seed=3):
    return SimulationDesign(seed=seed, **SMALL)


def test_single_replicate_rerun_is_bit_identical(tmp_path):
    for k in ("a", "b"):
        run_scenario(_small(), 1, grid=SMALL_GRID, out_dir=tmp_path / k)
    for f in ("replicates.csv", "summary.csv", "table.csv"):
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_replicate_streams_independent_of_count():
    rows2, _ = run_scenario(_small(), 2, grid=SMALL_GRID)
    rows3, _ = run_scenario(_small(), 3, grid=SMALL_GRID)
    assert rows2 == rows3[:2]


def test_parallel_matches_serial():
    a, sa = run_scenario(_small(), 2, grid=SMALL_GRID)
    b, sb = run_scenario(_small(), 2, grid=SMALL_GRID, n_jobs=2)
    assert a == b and sa == sb


def test_failed_replicates_are_counted(monkeypatch):
    real = sim.grid_search
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("boom")
        return real(*a, **k)

    monkeypatch.setattr(sim, "grid_search", flaky)
    rows, summary = run_scenario(_small(), 3, grid=SMALL_GRID)
    assert len(rows) == 2 and summary["failures"] == 1 and summary["replicates"] == 2
    assert [r["replicate"] for r in rows] == [0, 2]


def test_output_schema(tmp_path):
    rows, summary = run_scenario(SimulationDesign(seed=1, group_spec=GroupSpec("cat"), **SMALL), 2,
                                 grid=SMALL_GRID, out_dir=tmp_path)
    with open(tmp_path / "replicates.csv") as fh:
        head = next(csv.reader(fh))
    assert head[:7] == ["replicate", "fn", "fp", "sq_err", "ng_fn", "grp1", "grp2"]
    with open(tmp_path / "table.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["Type", "n", "Cn", "Tr", "FN", "FP", "Med_SE", "NG_FN", "GRP1", "GRP2"]
    for key in ("fn_mean", "fn_sd", "fp_mean", "fp_sd", "sq_err_median", "sq_err_sd", "grp1_pct", "grp2_pct",
                "cn", "tr", "failures"):
        assert key in summary


def test_table_row_format():
    s = {"n": 250, "replicates": 3, "cn": 0.2149, "tr": 0.3412, "fn_mean": 0.0, "fn_sd": 0.0, "fp_mean": 0.01,
         "fp_sd": 0.11, "sq_err_median": 95.421, "sq_err_sd": 2.72, "type": ""}
    head, vals = format_table_row(s)
    assert vals == ["250", "0.21", "0.34", "0.00 (0.00)", "0.01 (0.11)", "95.42 (2.72)"]


def test_zero_replicates_rejected():
    with pytest.raises(DataValidationError):
        run_scenario(_small(), 0)
