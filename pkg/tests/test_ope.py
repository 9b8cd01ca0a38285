import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidoscore.errors import ConfigError
from lidoscore.ope import (OpeParams, equal_frequency_bins, estimate_proxy_beta, phi_weights,
                           plim_ope1, plim_ope3, proxy_values, simulate, sweep, theta_weights)

BASE = OpeParams()


def test_phi_examples():
    assert phi_weights(OpeParams(delta1=0.0, gamma1=0.5)).phi1 == 0.0
    w = phi_weights(BASE)
    assert w.phi1 == pytest.approx(0.2) and w.phi0 == pytest.approx(0.8) and not w.limit
    lim = phi_weights(OpeParams(sigma_eta=0.0))
    assert lim.phi1 == 1.0 and lim.limit
    assert phi_weights(OpeParams(sigma_eta=1e-6)).phi1 == pytest.approx(1.0)


def test_plim_ope1_examples():
    assert plim_ope1(BASE) == pytest.approx(0.6)
    assert plim_ope1(OpeParams(gamma1=0.0)) == pytest.approx(0.5)
    assert plim_ope1(OpeParams(sigma_eta=0.0)) == pytest.approx(BASE.beta)


def test_theta_and_plim_ope3_examples():
    p = OpeParams(lambda1=1.0, sigma_psi=1.0)
    th = theta_weights(p)
    assert th.theta1 + th.theta2 == pytest.approx(1.25 / 2.25)
    assert plim_ope3(p) == pytest.approx(0.5 + 0.5 * 5 / 9)
    assert plim_ope3(BASE) == pytest.approx(plim_ope1(BASE))
    assert plim_ope3(OpeParams(lambda1=1.0, sigma_psi=0.0)) == pytest.approx(BASE.beta)
    assert theta_weights(OpeParams(lambda1=1.0, sigma_psi=0.0)).limit


valid = st.builds(
    OpeParams,
    sigma_X=st.floats(0.1, 5), delta1=st.floats(0, 3), gamma1=st.floats(0, 3),
    sigma_eta=st.floats(0, 5), lambda1=st.floats(-3, 3), sigma_psi=st.floats(0, 5))


@settings(max_examples=200, deadline=None)
@given(valid)
def test_weight_invariants(p):
    th = theta_weights(p)
    assert math.isclose(th.theta0 + th.theta1 + th.theta2, 1.0, abs_tol=1e-12)
    assert all(0.0 <= t <= 1.0 for t in th)
    lo, hi = sorted((p.delta1, p.beta))
    assert lo - 1e-12 <= plim_ope1(p) <= hi + 1e-12
    assert abs(plim_ope3(p) - p.beta) <= abs(plim_ope1(p) - p.beta) + 1e-12


@settings(max_examples=100, deadline=None)
@given(valid, st.lists(st.floats(0.01, 5), min_size=2, max_size=6))
def test_ope3_bias_nonincreasing_as_psi_shrinks(p, sigmas):
    biases = [abs(plim_ope3(OpeParams(**{**p.to_dict(), "sigma_psi": s})) - p.beta)
              for s in sorted(sigmas, reverse=True)]
    assert all(b <= a + 1e-12 for a, b in zip(biases, biases[1:]))


def test_param_validation():
    with pytest.raises(ConfigError):
        OpeParams(sigma_X=0.0)
    with pytest.raises(ConfigError):
        OpeParams(sigma_nu=-1.0)
    with pytest.raises(ConfigError):
        OpeParams(delta1=0.5, gamma1=-0.5)
    OpeParams(delta1=0.5, gamma1=-0.5, enforce_same_sign=False)
    with pytest.raises(ConfigError):
        OpeParams.from_dict({"sigma_x": 1})


def test_noise_free_sample_is_exact():
    p = OpeParams(mu_X=1.0, delta0=0.3, gamma0=-0.1, sigma_eta=0.0, sigma_nu=0.0,
                  lambda1=1.0, sigma_psi=0.0)
    s = simulate(p, 500, 1)
    assert np.allclose(s.y, p.alpha + p.beta * s.x, atol=1e-12)
    assert estimate_proxy_beta(s, "ope2") == pytest.approx(p.beta, abs=1e-10)
    assert estimate_proxy_beta(s, "ope3") == pytest.approx(p.beta, abs=1e-10)
    # the bin mean is exact only when every row is its own occupation
    s1 = simulate(p, 500, 1, n_bins=500)
    assert estimate_proxy_beta(s1, "ope1") == pytest.approx(p.beta, abs=1e-10)


def test_sample_moments_and_determinism():
    p = OpeParams(mu_X=2.0, sigma_X=3.0)
    n = 100_000
    s = simulate(p, n, 7)
    assert abs(s.x.mean() - 2.0) < 4 * 3.0 / math.sqrt(n)
    assert abs(s.x.std() - 3.0) < 4 * 3.0 / math.sqrt(2 * n)
    t = simulate(p, n, 7)
    for f in ("x", "z", "o", "y", "occ_bin"):
        assert np.array_equal(getattr(s, f), getattr(t, f))
    assert s.occ_bin.min() == 0 and s.occ_bin.max() == 49
    assert np.all(np.bincount(s.occ_bin) == n // 50)


def test_equal_frequency_bins_ties():
    b = equal_frequency_bins(np.zeros(10), 5)
    assert b.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_empty_bins_warn():
    s = simulate(BASE, 20, 0, n_bins=40)
    with pytest.warns(UserWarning, match="empty"):
        proxy_values(s, "ope1")
    with pytest.raises(ConfigError):
        proxy_values(simulate(BASE, 100, 0), "ope4")


def test_intercept_absorption():
    s = simulate(BASE, 5000, 3)
    b = estimate_proxy_beta(s, "ope1")
    s.y = s.y + 12.5
    assert estimate_proxy_beta(s, "ope1") == pytest.approx(b, abs=1e-10)


def test_large_sample_near_closed_forms():
    s = simulate(OpeParams(lambda1=1.0), 200_000, 11)
    assert estimate_proxy_beta(s, "ope1") == pytest.approx(0.6, abs=0.02)
    assert estimate_proxy_beta(s, "ope2") == pytest.approx(1.0, abs=0.02)
    assert estimate_proxy_beta(s, "ope3") == pytest.approx(0.5 + 0.5 * 5 / 9, abs=0.02)


def mean_abs_error(proxy, n, n_bins, seeds, params):
    target = {"ope1": plim_ope1, "ope2": lambda p: p.beta, "ope3": plim_ope3}[proxy](params)
    return np.mean([abs(estimate_proxy_beta(simulate(params, n, s, n_bins), proxy) - target)
                    for s in seeds])


@pytest.mark.parametrize("proxy", ["ope1", "ope2", "ope3"])
def test_monte_carlo_consistency_growing_bins(proxy):
    # with a fixed number of bins the ope1 bin means keep a coarsening bias,
    # so occupations get finer as the sample grows
    p = OpeParams(lambda1=1.0)
    errs = [mean_abs_error(proxy, n, int(math.sqrt(n) / 2), range(8), p)
            for n in (10_000, 100_000, 1_000_000)]
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("proxy", ["ope2", "ope3"])
def test_monte_carlo_consistency_fixed_bins(proxy):
    p = OpeParams(lambda1=1.0)
    errs = [mean_abs_error(proxy, n, 50, range(8), p) for n in (10_000, 100_000, 1_000_000)]
    assert errs[0] > errs[1] > errs[2]


def test_sweep_schedule_independent():
    overrides = [{"sigma_psi": s, "lambda1": 1.0} for s in (2.0, 1.0, 0.5)]
    a = sweep(BASE, 5000, 4, overrides, threads=1)
    b = sweep(BASE, 5000, 4, overrides, threads=3)
    assert a == b
    assert [r["cell"] for r in a] == [0, 1, 2]
    assert a[0]["plim_ope1"] == pytest.approx(0.6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sweep(BASE, 5000, 4)
