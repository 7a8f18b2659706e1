"""Linear and sparse (spike-and-slab) regression models.

Datasets are arrays of shape ``(B, n, 1 + p)``: column 0 is the response and
columns ``1..p`` the covariates (no intercept column).
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from ..priors import IndependentPrior
from .base import ConfigError, SimOutput, Simulator

MAX_DESIGN_TRIES = 10


def ar_correlation(p, rho):
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def draw_design(rng, size, n, p, rho=0.0):
    """Standard-normal covariates with ``Cor(X_j, X_k) = rho**|j-k|``."""
    Z = rng.standard_normal((size, n, p))
    if rho == 0.0:
        return Z
    chol = linalg.cholesky(ar_correlation(p, rho), lower=True)
    return Z @ chol.T


def _full_rank(X):
    """Row-wise check that ``[1, X]`` has full column rank."""
    ones = np.ones(X.shape[:-1] + (1,))
    D = np.concatenate([ones, X], axis=-1)
    eig = np.linalg.eigvalsh(np.swapaxes(D, -1, -2) @ D)
    return eig[..., 0] > 1e-10 * eig[..., -1]


def draw_full_rank_design(rng, size, n, p, rho=0.0):
    X = draw_design(rng, size, n, p, rho)
    for _ in range(MAX_DESIGN_TRIES):
        bad = ~_full_rank(X)
        if not bad.any():
            return X
        X[bad] = draw_design(rng, int(bad.sum()), n, p, rho)
    raise ConfigError(f"could not draw a full-rank design in {MAX_DESIGN_TRIES} tries (n={n}, p={p})")


def scenario_coefficients(p):
    """Coefficients ``beta_j = 2[(j mod 5) - 2]`` for ``j = 1..p``."""
    j = np.arange(1, p + 1)
    return 2.0 * ((j % 5) - 2)


class LinearRegression(Simulator):
    """``Y_i = beta_0 + sum_j X_ij beta_j + eps_i`` with Gaussian coefficient priors.

    ``theta = (beta_0, ..., beta_p, sigma2)``; targets are the coefficients.
    """

    name = "linear_regression"

    def __init__(self, p=5, n=100, rho=0.0, coef_var=10.0, a=0.5, b=0.05):
        if n < p + 2:
            raise ConfigError(f"need n >= p + 2 for least-squares summaries (n={n}, p={p})")
        self.p, self.n, self.rho = int(p), int(n), float(rho)
        self.coef_var, self.a, self.b = float(coef_var), float(a), float(b)
        self.param_names = tuple(f"beta{j}" for j in range(p + 1)) + ("sigma2",)
        self.target_names = tuple(f"beta{j}" for j in range(p + 1))

    def get_config(self):
        return {"p": self.p, "n": self.n, "rho": self.rho, "coef_var": self.coef_var, "a": self.a, "b": self.b}

    def default_prior(self):
        spec = {f"beta{j}": {"dist": "norm", "loc": 0.0, "scale": float(np.sqrt(self.coef_var))} for j in range(self.p + 1)}
        spec["sigma2"] = {"dist": "invgamma", "a": self.a, "scale": self.b}
        return IndependentPrior(spec)

    def scenario_theta(self, snr=0.8):
        """``beta_0 = 1``, patterned slopes, and ``sigma2`` giving the requested signal-to-noise ratio."""
        beta = scenario_coefficients(self.p)
        # covariates have unit variance and the given AR correlation
        signal = beta @ ar_correlation(self.p, self.rho) @ beta
        return np.concatenate([[1.0], beta, [signal / snr]])

    def simulate(self, theta, rng, X=None):
        theta = self._theta(theta)
        size = theta.shape[0]
        if X is None:
            X = draw_full_rank_design(rng, size, self.n, self.p, self.rho)
        else:
            X = np.broadcast_to(np.asarray(X, dtype=float), (size, self.n, self.p))
        beta0, beta, sigma = theta[:, 0], theta[:, 1 : self.p + 1], np.sqrt(theta[:, -1])
        mean = beta0[:, None] + np.einsum("bnp,bp->bn", X, beta)
        Y = mean + sigma[:, None] * rng.standard_normal((size, self.n))
        return SimOutput(np.concatenate([Y[..., None], X], axis=-1), {})

    def targets(self, theta, latent):
        return self._theta(theta)[:, : self.p + 1].copy()


class SparseRegression(Simulator):
    """Spike-and-slab regression with hierarchical sparsity prior.

    ``beta_j = 0`` with probability ``1 - pi`` and ``N(0, tau^2)`` otherwise;
    ``beta_0 ~ N(0, v^2)``, ``sigma^2 ~ InvGamma(a, b)``, ``pi ~ Beta(c, d)``.
    ``theta = (beta_0, ..., beta_p, sigma2, pi)``.  Targets are the inclusion
    indicators, ``sigma`` and ``n_test`` new responses at unobserved
    covariates drawn from the same design distribution.
    """

    name = "sparse_regression"

    def __init__(self, p=10, n=50, rho=0.5, n_test=10, v=1.0, tau=1.0, a=0.5, b=0.05, c=2.0, d=2.0):
        if n < p + 2:
            raise ConfigError(f"need n >= p + 2 for least-squares summaries (n={n}, p={p})")
        self.p, self.n, self.rho, self.n_test = int(p), int(n), float(rho), int(n_test)
        self.hyper = {"v": float(v), "tau": float(tau), "a": float(a), "b": float(b), "c": float(c), "d": float(d)}
        self.param_names = tuple(f"beta{j}" for j in range(p + 1)) + ("sigma2", "pi")
        self.target_names = (
            tuple(f"include{j}" for j in range(1, p + 1)) + ("sigma",) + tuple(f"y_test{i}" for i in range(1, n_test + 1))
        )

    def get_config(self):
        return {"p": self.p, "n": self.n, "rho": self.rho, "n_test": self.n_test, **self.hyper}

    def default_prior(self):
        return SpikeSlabPrior(self.p, **self.hyper)

    def sample_prior(self, rng, size):
        return self.default_prior().sample(rng, size)

    def scenario_theta(self):
        """``beta_0 = 0``, ``beta_1 = beta_2 = beta_6 = 0.5``, ``sigma = 1``."""
        beta = np.zeros(self.p)
        beta[[0, 1, 5]] = 0.5
        pi = 3.0 / self.p
        return np.concatenate([[0.0], beta, [1.0, pi]])

    def simulate(self, theta, rng, X=None):
        theta = self._theta(theta)
        size = theta.shape[0]
        if X is None:
            X = draw_full_rank_design(rng, size, self.n, self.p, self.rho)
        else:
            X = np.broadcast_to(np.asarray(X, dtype=float), (size, self.n, self.p))
        beta0, beta, sigma = theta[:, 0], theta[:, 1 : self.p + 1], np.sqrt(theta[:, self.p + 1])
        Y = beta0[:, None] + np.einsum("bnp,bp->bn", X, beta) + sigma[:, None] * rng.standard_normal((size, self.n))
        X_test = draw_design(rng, size, self.n_test, self.p, self.rho)
        y_test = beta0[:, None] + np.einsum("bnp,bp->bn", X_test, beta) + sigma[:, None] * rng.standard_normal((size, self.n_test))
        data = np.concatenate([Y[..., None], X], axis=-1)
        return SimOutput(data, {"y_test": y_test, "X_test": X_test})

    def targets(self, theta, latent):
        theta = self._theta(theta)
        include = (theta[:, 1 : self.p + 1] != 0).astype(float)
        sigma = np.sqrt(theta[:, self.p + 1 : self.p + 2])
        return np.concatenate([include, sigma, latent["y_test"]], axis=1)


class SpikeSlabPrior:
    """Hierarchical spike-and-slab prior; sampling only (it has a point-mass component)."""

    def __init__(self, p, v=1.0, tau=1.0, a=0.5, b=0.05, c=2.0, d=2.0):
        self.p = int(p)
        self.hyper = {"v": float(v), "tau": float(tau), "a": float(a), "b": float(b), "c": float(c), "d": float(d)}
        self.names = tuple(f"beta{j}" for j in range(p + 1)) + ("sigma2", "pi")

    def __eq__(self, other):
        return isinstance(other, SpikeSlabPrior) and self.p == other.p and self.hyper == other.hyper

    @property
    def dim(self):
        return len(self.names)

    def spec(self):
        return {"spike_slab": {"p": self.p, **self.hyper}}

    def sample(self, rng, size):
        h = self.hyper
        pi = rng.beta(h["c"], h["d"], size=size)
        include = rng.random((size, self.p)) < pi[:, None]
        slab = h["tau"] * rng.standard_normal((size, self.p))
        beta = np.where(include, slab, 0.0)
        beta0 = h["v"] * rng.standard_normal(size)
        sigma2 = 1.0 / rng.gamma(h["a"], 1.0 / h["b"], size=size)
        return np.column_stack([beta0, beta, sigma2, pi])

    def logpdf(self, theta):
        raise NotImplementedError("the spike-and-slab prior has no Lebesgue density; use it as its own training distribution")
