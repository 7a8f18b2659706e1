import numpy as np

from ..priors import IndependentPrior
from .base import ConfigError, SimOutput, Simulator


class ConjugateGaussian(Simulator):
    """``theta ~ N(0, 1)``, ``Y_i | theta ~ N(theta, 1)`` for ``i = 1..n``.

    The posterior is ``N(n * mean(Y) / (n + 1), 1 / (n + 1))`` in closed form,
    which makes this model the reference oracle for the estimator.
    """

    name = "conjugate_gaussian"
    param_names = ("theta",)
    target_names = ("theta",)

    def __init__(self, n=5):
        if n < 1:
            raise ConfigError(f"need at least one observation per dataset, got n={n}")
        self.n = int(n)

    def get_config(self):
        return {"n": self.n}

    def default_prior(self):
        return IndependentPrior({"theta": {"dist": "norm", "loc": 0.0, "scale": 1.0}})

    def simulate(self, theta, rng):
        theta = self._theta(theta)
        Y = theta[:, :1] + rng.standard_normal((theta.shape[0], self.n))
        return SimOutput(Y, {})

    def targets(self, theta, latent):
        return self._theta(theta)[:, :1].copy()

    def analytic_posterior(self, Y):
        """Posterior mean and sd for each dataset (row) of ``Y``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n = Y.shape[1]
        if n < 1:
            raise ConfigError("analytic posterior needs n >= 1 observations")
        return n * Y.mean(axis=1) / (n + 1), np.full(Y.shape[0], 1.0 / np.sqrt(n + 1))
