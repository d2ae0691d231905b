import numpy as np
import pytest
from scipy import special

import discnet.estimator
import discnet.optimizer
import discnet.pipeline
import discnet.simulation
import discnet.tuning
from discnet.optimizer import kkt_residuals
from discnet.survival import AugmentedDesign, augment_arrays

KKT_TOL = 1e-5
_PATCHED = (discnet.optimizer, discnet.tuning, discnet.estimator, discnet.pipeline)
_original_fit = discnet.optimizer.fit
KKT_LOG = {"checked": 0, "violations": []}
ACCEPTANCE = []


def _certify(design, penalty, result, free):
    if not result.converged:
        return
    r = kkt_residuals(design, result.params, penalty, free)
    KKT_LOG["checked"] += 1
    if r["active"] >= KKT_TOL or r["inactive_excess"] > KKT_TOL:
        KKT_LOG["violations"].append(r)


def _certified_fit(design, penalty, init=None, controls=None, free=None):
    result = _original_fit(design, penalty, init=init, controls=controls, free=free)
    _certify(design, penalty, result, free)
    return result


# installed at import so that test modules binding ``fit`` directly are covered too
for _mod in _PATCHED:
    _mod.fit = _certified_fit


@pytest.fixture(autouse=True)
def kkt_certification():
    """Every converged fit run by a test must satisfy the KKT bounds."""
    before = len(KKT_LOG["violations"])
    yield
    new = KKT_LOG["violations"][before:]
    assert not new, f"converged fits violating KKT bounds: {new}"


def record_criterion(name, passed, detail):
    """Log one acceptance line; printed live and again in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
    terminalreporter.section("KKT certification")
    terminalreporter.write_line(f"converged fits checked: {KKT_LOG['checked']}, "
                                f"violations: {len(KKT_LOG['violations'])}")


def random_survival(rng, n=20, p=3, t_max=6, truncate=True, q=1):
    """Small random survival data set and its augmented design."""
    X = rng.normal(size=(n, p))
    time = rng.integers(1, t_max + 1, size=n)
    left = np.array([rng.integers(1, t + 1) for t in time]) if truncate else np.ones(n, dtype=int)
    event = rng.integers(0, 2, size=n)
    rows = int(np.sum(time - left + 1))
    Z = rng.normal(size=(rows, q)) if q > 1 else (np.ones((rows, 1)) if q == 1 else np.zeros((rows, 0)))
    return X, time, left, event, augment_arrays(X, time, left, event, t_max, Z)


def clustered_logistic(seed, n=500, m=10, sigma2=1.0, beta=(1.0, -1.0)):
    """Random-intercept logistic data: ``m`` Bernoulli rows per subject."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, len(beta)))
    gam = np.linspace(-1, 1, m)
    b = np.sqrt(sigma2) * rng.standard_normal(n)
    eta = gam[None, :] + (X @ np.asarray(beta) + b)[:, None]
    y = (rng.uniform(size=(n, m)) < special.expit(eta)).astype(float)
    design = AugmentedDesign(y.ravel(), X, np.repeat(np.arange(n), m), np.tile(np.arange(1, m + 1), n),
                             np.ones((n * m, 1)), m)
    return X, y, design


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def concomitant_data(kappa, seed, n=2000, a0=0.0, a1=1.5):
    """Chemical, lipid and infertility outcome driven by the standardised Box-Cox ratio."""
    from discnet.preprocess import boxcox_generalized
    rng = np.random.default_rng(seed)
    x = rng.lognormal(0.5, 1.0, n)
    s = rng.lognormal(0.0, 0.5, n)
    g = boxcox_generalized(x, s, kappa)
    g = (g - g.mean()) / g.std(ddof=1)
    y = (rng.uniform(size=n) < special.expit(a0 + a1 * g)).astype(float)
    return x, s, y


def write_imputations(outdir, m=10, n=400, p=8, beta=0.5, seed=0, t_max=12):
    """``m`` imputation CSVs sharing outcomes; ``chem1`` carries log-odds ``beta`` per sd."""
    import pandas as pd
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.2, 3.0, size=(n, p))
    z = (U - U.mean(0)) / U.std(0, ddof=1)
    gam = np.linspace(-2.2, -1.5, t_max)
    b = 0.5 * rng.standard_normal(n)
    eta = gam[None, :] + (beta * z[:, 0] + b)[:, None]
    hit = rng.uniform(size=eta.shape) < special.expit(eta)
    T = np.where(hit.any(1), hit.argmax(1) + 1, t_max + 1)
    C = rng.integers(6, t_max + 1, size=n)
    L = rng.choice([1, 2, 3], size=n, p=[0.6, 0.2, 0.2])
    keep = T >= L
    T, C, L, U = T[keep], C[keep], L[keep], U[keep]
    time = np.minimum(T, C)
    status = (T <= C).astype(int)
    miss = rng.uniform(size=U.shape) < 0.1
    paths = []
    for k in range(m):
        Ui = U.copy()
        Ui[miss] = rng.uniform(0.2, 3.0, size=miss.sum())
        df = pd.DataFrame({"id": np.arange(len(time)), "time": time, "left": L, "status": status})
        for j in range(p):
            df[f"chem{j + 1}"] = np.expm1(Ui[:, j])
        path = f"{outdir}/imp{k:02d}.csv"
        df.to_csv(path, index=False)
        paths.append(path)
    return paths
