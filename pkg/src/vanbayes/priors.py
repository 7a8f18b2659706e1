"""Parameter distributions used as priors and training distributions.

A distribution over ``theta`` is described by a plain dict so it can live in
config files and batch headers::

    {"theta": {"dist": "norm", "loc": 0, "scale": 1},
     "mu":    {"fixed": 0.1}}

``dist`` names any :mod:`scipy.stats` continuous distribution; the remaining
keys are its keyword arguments.
"""

from __future__ import annotations

import copy

import numpy as np
from scipy import stats


class Fixed:
    """Point mass, used for parameters held at a known value."""

    def __init__(self, value):
        self.value = float(value)

    def rvs(self, size=None, random_state=None):
        return np.full(size, self.value)

    def logpdf(self, x):
        return np.where(np.asarray(x) == self.value, 0.0, -np.inf)

    def cdf(self, x):
        return np.where(np.asarray(x) < self.value, 0.0, 1.0)

    def ppf(self, q):
        return np.full(np.shape(q), self.value)


def make_distribution(spec):
    """Build a frozen scipy distribution (or :class:`Fixed`) from a spec dict."""
    spec = dict(spec)
    if "fixed" in spec:
        return Fixed(spec["fixed"])
    name = spec.pop("dist")
    try:
        family = getattr(stats, name)
    except AttributeError:
        raise ValueError(f"unknown distribution {name!r}") from None
    return family(**spec)


class IndependentPrior:
    """Product of independent univariate distributions, one per named parameter."""

    def __init__(self, spec: dict):
        self._spec = copy.deepcopy(spec)
        self.names = tuple(spec)
        self.components = [make_distribution(spec[k]) for k in self.names]

    def __repr__(self):
        return f"IndependentPrior({self._spec!r})"

    def __eq__(self, other):
        return isinstance(other, IndependentPrior) and self._spec == other._spec

    @property
    def dim(self):
        return len(self.names)

    def spec(self):
        return copy.deepcopy(self._spec)

    def sample(self, rng, size):
        cols = [np.asarray(c.rvs(size=size, random_state=rng), dtype=float) for c in self.components]
        return np.column_stack(cols) if cols else np.empty((size, 0))

    def logpdf(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        out = np.zeros(theta.shape[0])
        for j, c in enumerate(self.components):
            out += c.logpdf(theta[:, j])
        return out

    def marginal(self, name):
        return self.components[self.names.index(name)]

    def replace(self, **updates):
        spec = self.spec()
        spec.update(updates)
        return IndependentPrior(spec)
