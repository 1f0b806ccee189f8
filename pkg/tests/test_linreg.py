import numpy as np
import pytest
from scipy import stats

from dogates.linreg import wls


def _brute_force(x, y, w):
    """Reference solution of the weighted normal equations."""
    xtw = x.T * w
    return np.linalg.solve(xtw @ x, xtw @ y)


def _brute_force_hc0(x, y, w):
    xtw = x.T * w
    bread = np.linalg.inv(xtw @ x)
    coef = bread @ (xtw @ y)
    resid = y - x @ coef
    meat = (x * (w**2 * resid**2)[:, None]).T @ x
    return coef, bread @ meat @ bread


def test_exact_linear_fit_has_zero_se():
    x = np.linspace(1, 5, 20).reshape(-1, 1)
    y = 2.0 * x[:, 0]
    fit = wls(x, y, np.ones(20))
    assert fit.coef[0] == pytest.approx(2.0, abs=1e-12)
    assert fit.se[0] == pytest.approx(0.0, abs=1e-10)


def test_intercept_only_recovers_the_mean():
    x = np.ones((5, 1))
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    fit = wls(x, y, np.ones(5))
    assert fit.coef[0] == pytest.approx(3.0, abs=1e-12)


def test_matches_normal_equations_on_random_problems():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(30, 200))
        q = int(rng.integers(1, 7))
        x = rng.normal(size=(n, q))
        y = x @ rng.normal(size=q) + rng.normal(size=n)
        w = rng.uniform(0.1, 3.0, n)
        fit = wls(x, y, w)
        ref = _brute_force(x, y, w)
        assert np.abs(fit.coef - ref).max() < 1e-10


def test_hc0_covariance_matches_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(80, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=80) * (1 + np.abs(x[:, 0]))
    w = rng.uniform(0.5, 1.5, 80)
    fit = wls(x, y, w)
    _, cov_ref = _brute_force_hc0(x, y, w)
    assert np.abs(fit.cov - cov_ref).max() < 1e-10
    assert np.abs(fit.se - np.sqrt(np.diag(cov_ref))).max() < 1e-10


def test_p_values_and_ci_follow_normal_theory():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 2))
    y = x[:, 0] + rng.normal(size=60)
    fit = wls(x, y, np.ones(60), alpha=0.10)
    z = fit.coef / fit.se
    assert np.allclose(fit.p_values, 2 * stats.norm.sf(np.abs(z)), atol=1e-12)
    half = stats.norm.ppf(0.95) * fit.se
    assert np.allclose(fit.ci_low, fit.coef - half, atol=1e-12)
    assert np.allclose(fit.ci_high, fit.coef + half, atol=1e-12)


def test_zero_se_with_nonzero_coef_gives_zero_p():
    x = np.linspace(1, 3, 10).reshape(-1, 1)
    fit = wls(x, 4.0 * x[:, 0], np.ones(10))
    assert fit.p_values[0] == 0.0


def test_zero_weights_reduce_n_used():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    w = np.ones(30)
    w[:10] = 0.0
    fit = wls(x, y, w)
    assert fit.n_used == 20
    # rows with zero weight must not influence the coefficients
    ref = _brute_force(x[10:], y[10:], w[10:])
    assert np.allclose(fit.coef, ref, atol=1e-10)


def test_all_zero_weights_rejected():
    x = np.ones((5, 1))
    with pytest.raises(ValueError, match="weights"):
        wls(x, np.ones(5), np.zeros(5))


def test_negative_weights_rejected():
    x = np.ones((5, 1))
    w = np.ones(5)
    w[2] = -1.0
    with pytest.raises(ValueError):
        wls(x, np.ones(5), w)


def test_rank_deficient_design_names_the_column():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(40, 1))
    x = np.hstack([a, 2 * a])
    with pytest.raises(ValueError, match="second"):
        wls(x, rng.normal(size=40), np.ones(40), column_names=["first", "second"])


def test_rank_deficiency_only_counts_weighted_rows():
    # the second column is constant zero on the positively weighted rows
    x = np.ones((10, 2))
    x[:5, 1] = np.arange(5)
    x[5:, 1] = 0.0
    w = np.zeros(10)
    w[5:] = 1.0
    with pytest.raises(ValueError, match="rank deficient"):
        wls(x, np.ones(10), w)


def test_alpha_bounds_checked():
    x = np.ones((5, 1))
    with pytest.raises(ValueError):
        wls(x, np.ones(5), np.ones(5), alpha=1.5)


def test_more_columns_than_rows_rejected():
    x = np.ones((3, 5))
    with pytest.raises(ValueError):
        wls(x, np.ones(3), np.ones(3))
