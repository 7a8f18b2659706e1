import csv
import itertools

import numpy as np
import pytest
from scipy import integrate, special, stats

from vanbayes.gibbs import (
    DEFAULT_HYPER,
    GibbsConfig,
    batch_means_se,
    gibbs_run,
    pip_estimate,
    predictive_draws,
    sigma_posterior_summary,
    write_chain_csv,
)


def _quadrature_posterior(Y, X, h=DEFAULT_HYPER):
    """Exact PIPs and E[sigma | Y] by enumerating inclusion patterns and
    integrating the error variance numerically on the log scale."""
    n, p = X.shape
    patterns = list(itertools.product([0, 1], repeat=p))
    log_w, e_sigma = [], []
    ig = stats.invgamma(h["a"], scale=h["b"])
    for g in patterns:
        k = sum(g)
        Xg = X[:, np.array(g, dtype=bool)]
        V = h["v"] ** 2 * np.ones((n, n)) + h["tau"] ** 2 * Xg @ Xg.T
        log_pg = special.betaln(h["c"] + k, h["d"] + p - k) - special.betaln(h["c"], h["d"])

        def integrand(log_s, moment):
            s = np.exp(log_s)
            ll = stats.multivariate_normal(np.zeros(n), s * np.eye(n) + V).logpdf(Y)
            return np.exp(ll + ig.logpdf(s) + log_s + 40.0) * s ** (moment / 2)

        z = integrate.quad(integrand, -12, 8, args=(0,), limit=400, epsrel=1e-10)[0]
        m1 = integrate.quad(integrand, -12, 8, args=(1,), limit=400, epsrel=1e-10)[0]
        log_w.append(log_pg + np.log(z))
        e_sigma.append(m1 / z)
    w = np.exp(np.array(log_w) - max(log_w))
    w /= w.sum()
    pip = np.array(patterns, dtype=float).T @ w
    return pip, float(np.dot(w, e_sigma))


@pytest.mark.parametrize("p", [1, 2])
def test_micro_instance_matches_quadrature(p):
    rng = np.random.default_rng(100 + p)
    n = 12
    X = rng.normal(size=(n, p))
    beta = np.array([0.6, 0.0])[:p]
    Y = 0.2 + X @ beta + 0.8 * rng.normal(size=n)
    pip_exact, sigma_exact = _quadrature_posterior(Y, X)

    chains = 20
    sample = gibbs_run(np.tile(Y, (chains, 1)), np.tile(X, (chains, 1, 1)),
                       cfg=GibbsConfig(iterations=5000, burn_in=500, seed=p))
    pip, se = pip_estimate(sample)
    pooled_se = np.sqrt(np.mean(se**2, axis=0) / chains)
    assert np.all(np.abs(pip.mean(axis=0) - pip_exact) < 4 * pooled_se + 2e-3)

    sigma = np.sqrt(sample.sigma2)
    sigma_se = np.sqrt(np.mean(batch_means_se(sigma) ** 2) / chains)
    assert abs(sigma.mean() - sigma_exact) < 4 * sigma_se + 2e-3


def test_deterministic_given_seed(rng):
    Y = rng.normal(size=(2, 20))
    X = rng.normal(size=(2, 20, 3))
    cfg = GibbsConfig(iterations=50, burn_in=10, seed=4)
    a, b = gibbs_run(Y, X, cfg=cfg), gibbs_run(Y, X, cfg=cfg)
    assert a.beta.tobytes() == b.beta.tobytes()


def test_indicator_and_coefficient_agree(rng):
    s = gibbs_run(rng.normal(size=(3, 20)), rng.normal(size=(3, 20, 4)), cfg=GibbsConfig(iterations=200, burn_in=0))
    np.testing.assert_array_equal(s.include, s.beta != 0)


def test_thinning_and_truth_init(rng):
    theta = np.array([0.0, 0.5, 0.0, 1.0, 0.5])
    Y = rng.normal(size=30)
    X = rng.normal(size=(30, 2))
    s = gibbs_run(Y, X, cfg=GibbsConfig(iterations=100, burn_in=0, thin=3, init="truth"), theta_init=theta)
    assert s.n_draws == 34
    with pytest.raises(ValueError, match="theta_init"):
        gibbs_run(Y, X, cfg=GibbsConfig(init="truth"))


def test_strong_signal_is_found(rng):
    X = rng.normal(size=(50, 3))
    Y = 2.0 * X[:, 0] + 0.3 * rng.normal(size=50)
    pip, _ = pip_estimate(gibbs_run(Y, X, cfg=GibbsConfig(iterations=2000, burn_in=200)))
    assert pip[0, 0] > 0.99
    med, lo, hi = sigma_posterior_summary(gibbs_run(Y, X, cfg=GibbsConfig(iterations=2000, burn_in=200)))
    assert lo[0] < 0.3 < hi[0] and lo[0] < med[0] < hi[0]


def test_batch_means_on_iid_draws(rng):
    draws = rng.normal(size=(100_000, 2))
    np.testing.assert_allclose(batch_means_se(draws), 1 / np.sqrt(100_000), rtol=0.3)


def test_predictive_mean_without_noise(rng):
    s = gibbs_run(rng.normal(size=20), rng.normal(size=(20, 2)), cfg=GibbsConfig(iterations=30, burn_in=0))
    Xn = np.array([[1.0, 0.0], [0.0, 0.0]])
    mean = predictive_draws(s, Xn, rng, noise=False)
    np.testing.assert_allclose(mean[:, 0, 1], s.beta0[:, 0])
    np.testing.assert_allclose(mean[:, 0, 0], s.beta0[:, 0] + s.beta[:, 0, 0])
    assert predictive_draws(s, Xn, rng).shape == (30, 1, 2)


def test_chain_csv_has_named_columns(tmp_path, rng):
    s = gibbs_run(rng.normal(size=20), rng.normal(size=(20, 2)), cfg=GibbsConfig(iterations=5, burn_in=0))
    path = tmp_path / "chain.csv"
    write_chain_csv(s, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["beta0", "beta1", "beta2", "sigma2", "pi", "include1", "include2"]
    assert len(rows) == 6
    assert float(rows[1][3]) == s.sigma2[0, 0]


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"burn_in": -1}, {"init": "zeros"}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GibbsConfig(**kwargs)
