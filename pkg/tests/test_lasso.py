import numpy as np
import pytest

from lidoscore import lasso
from lidoscore.errors import ConfigError
from lidoscore.lasso import (cv_select, default_grid, fold_assignment, kkt_violation, lambda_max,
                             lasso_path, soft_threshold)
from lidoscore.regression import ols_fit


def prox_gradient_oracle(X, y, lam, iters=20000):
    """Plain ISTA on the standardized problem, mapped back to the original scale."""
    n = len(y)
    mu, sd = X.mean(0), X.std(0)
    Z = (X - mu) / sd
    yc = y - y.mean()
    L = np.linalg.eigvalsh(Z.T @ Z / n).max()
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        grad = -Z.T @ (yc - Z @ b) / n
        v = b - grad / L
        b = np.sign(v) * np.maximum(np.abs(v) - lam / L, 0.0)
    coef = b / sd
    return coef, y.mean() - coef @ mu


def test_soft_threshold():
    assert soft_threshold(3, 1) == 2
    assert soft_threshold(-3, 1) == -2
    assert soft_threshold(0.5, 1) == 0
    with pytest.raises(ValueError):
        soft_threshold(1, -1)


def test_lambda_max_fixtures():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert lambda_max(X, [1.0, 1.0, -1.0, -1.0]) == pytest.approx(0.0, abs=1e-15)
    # y with unit variance, x = y: |<x,y>|/n = var(y) = 1
    y = np.array([-1.0, -1.0, 1.0, 1.0])
    assert lambda_max(y[:, None], y) == pytest.approx(1.0)
    # y = 1..4: yc = (-1.5,-.5,.5,1.5), sum yc^2 = 5, sd = sqrt(1.25) -> 5 / (4 sqrt(1.25))
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert lambda_max(y[:, None], y) == pytest.approx(5 / (4 * np.sqrt(1.25)))
    assert lambda_max(np.ones((4, 1)) * [[1.0]] + [[0.0], [1.0], [0.0], [1.0]], np.ones(4)) == 0.0


def test_above_lambda_max_all_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 5))
    y = X[:, 0] + rng.normal(size=60)
    lm = lambda_max(X, y)
    for lam in (lm, 1.01 * lm):
        fit = lasso_path(X, y, [lam])[0]
        assert fit.n_nonzero == 0 and np.all(fit.coef == 0.0)
        assert fit.intercept == pytest.approx(y.mean())


def well_conditioned(n=200, p=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = 1.0 + X @ np.linspace(-1, 1, p) + rng.normal(size=n)
    return X, y


def test_zero_penalty_matches_ols():
    X, y = well_conditioned()
    grid = list(default_grid(lambda_max(X, y), 50)) + [0.0]
    fit = lasso_path(X, y, grid)[-1]
    ols = ols_fit(np.column_stack([np.ones(len(y)), X]), y)
    assert fit.converged
    rel = np.abs(fit.coef - ols.coef[1:]) / np.abs(ols.coef[1:])
    assert rel.max() < 1e-6
    assert abs(fit.intercept - ols.coef[0]) / abs(ols.coef[0]) < 1e-6


def test_kkt_along_path():
    X, y = well_conditioned(seed=1)
    for fit in lasso_path(X, y):
        assert fit.converged
        assert kkt_violation(fit, X, y) < 1e-6


def test_gram_and_residual_solvers_agree(monkeypatch):
    X, y = well_conditioned(n=80, p=12, seed=2)
    a = lasso_path(X, y)
    monkeypatch.setattr(lasso, "GRAM_MAX_P", 0)
    b = lasso_path(X, y)
    for fa, fb in zip(a, b):
        assert np.allclose(fa.coef, fb.coef, atol=1e-6)
        assert (fa.coef == 0).tolist() == (fb.coef == 0).tolist() or \
            np.abs(fa.coef - fb.coef).max() < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_p2_matches_proximal_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    n = 50
    x1 = rng.normal(size=n)
    x2 = 0.8 * x1 + 0.6 * rng.normal(size=n)
    X = np.column_stack([x1 * rng.uniform(0.5, 3), x2 + rng.normal()])
    y = 0.5 + 1.5 * x1 - 0.7 * x2 + rng.normal(size=n)
    lam = rng.uniform(0.02, 0.8) * lambda_max(X, y)
    fit = lasso_path(X, y, [lam], tol=1e-12, max_iter=100_000)[0]
    coef, icpt = prox_gradient_oracle(X, y, lam)
    assert np.abs(fit.coef - coef).max() < 1e-5
    assert abs(fit.intercept - icpt) < 1e-5


def test_orthonormal_monotone_support():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.normal(size=(64, 8)))
    Q -= Q.mean(0)
    y = Q @ np.arange(1.0, 9.0) + 0.01 * rng.normal(size=64)
    nz = [f.n_nonzero for f in lasso_path(Q, y)]
    assert all(a <= b for a, b in zip(nz, nz[1:]))
    assert nz[0] == 0 and nz[-1] == 8


def test_objective_trace_nonincreasing_and_exact_zeros():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 30))
    X[:, 1] = X[:, 0] + 0.05 * rng.normal(size=40)
    y = X[:, 0] - X[:, 2] + rng.normal(size=40)
    for fit in lasso_path(X, y, trace=True):
        tr = fit.objective_trace
        assert np.all(np.diff(tr) <= 1e-12 * np.maximum(1.0, np.abs(tr[:-1])))
        small = np.abs(fit.coef) < 1e-14
        assert np.all(fit.coef[small] == 0.0)


def test_path_continuity():
    X, y = well_conditioned(n=100, p=6, seed=5)
    lm = lambda_max(X, y)
    coarse = lasso_path(X, y, np.geomspace(lm, 0.01 * lm, 20))
    fine = lasso_path(X, y, np.geomspace(lm, 0.01 * lm, 39))   # every other point shared
    gaps_c = [np.abs(a.coef - b.coef).max() for a, b in zip(coarse, coarse[1:])]
    gaps_f = [np.abs(a.coef - b.coef).max() for a, b in zip(fine, fine[1:])]
    assert max(gaps_f) < max(gaps_c)
    for i, f in enumerate(coarse):
        assert np.allclose(f.coef, fine[2 * i].coef, atol=1e-6)


def test_p_greater_than_n():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 60))
    y = 3 * X[:, 5] + 0.1 * rng.normal(size=20)
    fits = lasso_path(X, y)
    assert all(np.isfinite(f.coef).all() for f in fits)
    assert fits[10].coef[5] > 0


def test_not_converged_is_flagged():
    X, y = well_conditioned(n=50, p=5)
    fit = lasso_path(X, y, [0.01], max_iter=1)[0]
    assert not fit.converged and fit.n_iterations == 1


def test_grid_and_tol_validation():
    X, y = well_conditioned(n=30, p=3)
    with pytest.raises(ConfigError):
        lasso_path(X, y, [0.1, 0.2])
    with pytest.raises(ConfigError):
        lasso_path(X, y, [0.1], tol=0)
    with pytest.warns(UserWarning):
        lasso_path(np.column_stack([X, np.ones(30)]), y, [0.1])


# cross-validation -----------------------------------------------------------

def test_fold_sizes():
    f = fold_assignment(103, 10, 7)
    sizes = np.bincount(f)
    assert sizes.max() - sizes.min() <= 1 and len(sizes) == 10
    assert np.array_equal(f, fold_assignment(103, 10, 7))
    with pytest.raises(ConfigError):
        fold_assignment(5, 10, 0)
    with pytest.raises(ConfigError):
        fold_assignment(5, 1, 0)


def test_lambda_min_definition():
    X, y = well_conditioned(n=120, p=8, seed=8)
    cv = cv_select(X, y, k=5, seed=1)
    m = cv.mean_mse
    assert m[cv.index_min] == m.min()
    assert cv.lambda_min == cv.lambda_grid[np.flatnonzero(m == m.min())].max()
    assert cv.lambda_1se >= cv.lambda_min
    assert cv.fit_at("min").lambda_ == cv.lambda_min


def test_loo_matches_brute_force():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(10, 3))
    y = X[:, 0] + 0.5 * rng.normal(size=10)
    grid = default_grid(lambda_max(X, y), 8)
    cv = cv_select(X, y, k=10, grid=grid, seed=3)
    for i in range(10):
        keep = np.arange(10) != i
        path = lasso_path(X[keep], y[keep], grid)
        errs = [(y[i] - f.predict(X[i:i + 1])[0]) ** 2 for f in path]
        assert np.allclose(cv.fold_mse[:, cv.folds[i]], errs, rtol=1e-12, atol=1e-15)


def test_pure_noise_selects_null_model():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(300, 20))
    y = rng.normal(size=300)
    cv = cv_select(X, y, k=10, seed=10)
    assert cv.fit_at().n_nonzero <= 3


def test_strong_signal_selected():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(200, 10))
    y = 2 * X[:, 0] + 0.1 * rng.normal(size=200)
    cv = cv_select(X, y, k=10, seed=0)
    assert cv.fit_at().coef[0] != 0


def test_cv_thread_independence():
    X, y = well_conditioned(n=150, p=12, seed=12)
    a = cv_select(X, y, k=10, seed=5, threads=1)
    b = cv_select(X, y, k=10, seed=5, threads=4)
    assert np.array_equal(a.fold_mse, b.fold_mse)
    assert a.lambda_min == b.lambda_min
    assert all(np.array_equal(f.coef, g.coef) for f, g in zip(a.path, b.path))


def test_summary_written(tmp_path):
    X, y = well_conditioned(n=60, p=4)
    cv = cv_select(X, y, k=3, grid=default_grid(lambda_max(X, y), 5))
    cv.write_summary(tmp_path / "s.tsv")
    lines = (tmp_path / "s.tsv").read_text().splitlines()
    assert lines[0] == "lambda\tn_nonzero\tmean_cv_mse" and len(lines) == 6
    cv.fit_at().write(tmp_path / "c.tsv")
    assert (tmp_path / "c.tsv").read_text().startswith("term\tcoefficient\n(Intercept)\t")
