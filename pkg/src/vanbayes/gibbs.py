"""Gibbs sampler for spike-and-slab linear regression.

Hierarchy (per dataset)::

    Y | beta, sigma2 ~ N(beta0 + X beta, sigma2 I)
    beta0 ~ N(0, v^2),  beta_j = 0 w.p. 1 - pi else N(0, tau^2)
    sigma2 ~ InvGamma(a, b),  pi ~ Beta(c, d)

Each inclusion indicator is drawn with its coefficient integrated out, then
the coefficient is drawn given the indicator, so the pair is updated jointly
from its exact conditional.  All datasets of a batch run as independent
chains in lockstep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

DEFAULT_HYPER = {"v": 1.0, "tau": 1.0, "a": 0.5, "b": 0.05, "c": 2.0, "d": 2.0}


@dataclass
class GibbsConfig:
    iterations: int = 40_000
    burn_in: int = 10_000
    seed: int = 0
    init: str = "prior"  # or "truth"
    thin: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.burn_in < 0:
            raise ValueError("iterations must be positive and burn_in nonnegative")
        if self.init not in ("prior", "truth"):
            raise ValueError("init must be 'prior' or 'truth'")


@dataclass
class PosteriorSample:
    """Post-burn-in draws; arrays are ``(draws, chains, ...)``."""

    beta0: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    pi: np.ndarray
    include: np.ndarray
    hyper: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.beta0.shape[0]


def gibbs_run(Y, X, hyper=None, cfg=None, theta_init=None):
    """Run one chain per dataset.

    ``Y`` is ``(C, n)`` or ``(n,)``; ``X`` is ``(C, n, p)`` or ``(n, p)``.
    ``theta_init`` (``(C, p + 3)`` as ``beta0, beta, sigma2, pi``) is used
    when ``cfg.init == "truth"``.
    """
    cfg = cfg or GibbsConfig()
    h = {**DEFAULT_HYPER, **(hyper or {})}
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    if Y.ndim == 1:
        Y, X = Y[None], X[None]
    C, n, p = X.shape
    rng = np.random.default_rng(cfg.seed)

    if cfg.init == "truth":
        if theta_init is None:
            raise ValueError("init='truth' needs theta_init")
        t = np.broadcast_to(np.asarray(theta_init, dtype=float), (C, p + 3))
        beta0, beta, sigma2, pi = t[:, 0].copy(), t[:, 1 : p + 1].copy(), t[:, p + 1].copy(), t[:, p + 2].copy()
    else:
        pi = rng.beta(h["c"], h["d"], size=C)
        beta = np.where(rng.random((C, p)) < pi[:, None], h["tau"] * rng.standard_normal((C, p)), 0.0)
        beta0 = h["v"] * rng.standard_normal(C)
        sigma2 = Y.var(axis=1) + 1e-8
    include = beta != 0

    xx = np.einsum("cnj,cnj->cj", X, X)
    tau2, v2 = h["tau"] ** 2, h["v"] ** 2
    n_keep = (cfg.iterations + cfg.thin - 1) // cfg.thin
    out = PosteriorSample(
        beta0=np.empty((n_keep, C)), beta=np.empty((n_keep, C, p)), sigma2=np.empty((n_keep, C)),
        pi=np.empty((n_keep, C)), include=np.empty((n_keep, C, p), dtype=bool), hyper=h,
    )
    fit = np.einsum("cnj,cj->cn", X, beta)
    k = 0
    for it in range(cfg.burn_in + cfg.iterations):
        # intercept
        r = Y - fit
        prec = n / sigma2 + 1.0 / v2
        beta0 = r.sum(axis=1) / sigma2 / prec + rng.standard_normal(C) / np.sqrt(prec)
        # indicator and coefficient pairs
        log_prior_odds = np.log(pi) - np.log1p(-pi)
        for j in range(p):
            xj = X[:, :, j]
            partial = Y - beta0[:, None] - fit + xj * beta[:, j : j + 1]
            u = np.einsum("cn,cn->c", xj, partial)
            P = xx[:, j] / sigma2 + 1.0 / tau2
            m = u / sigma2 / P
            log_bf = -0.5 * np.log(tau2 * P) + 0.5 * m * m * P
            logit = log_prior_odds + log_bf
            on = rng.random(C) < expit(logit)
            new = np.where(on, m + rng.standard_normal(C) / np.sqrt(P), 0.0)
            fit += xj * (new - beta[:, j])[:, None]
            beta[:, j] = new
            include[:, j] = on
        # variance and inclusion rate
        r = Y - beta0[:, None] - fit
        rss = np.einsum("cn,cn->c", r, r)
        sigma2 = (h["b"] + 0.5 * rss) / rng.gamma(h["a"] + 0.5 * n, 1.0, size=C)
        n_in = include.sum(axis=1)
        pi = rng.beta(h["c"] + n_in, h["d"] + p - n_in)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            out.beta0[k], out.beta[k], out.sigma2[k], out.pi[k], out.include[k] = beta0, beta, sigma2, pi, include
            k += 1
    if not (np.all(np.isfinite(out.beta)) and np.all(out.sigma2 > 0)):
        raise FloatingPointError("Gibbs chain produced non-finite draws")
    return out


def batch_means_se(draws, n_batches=50):
    """Batch-means Monte Carlo standard error along axis 0."""
    draws = np.asarray(draws, dtype=float)
    T = draws.shape[0]
    n_batches = max(2, min(n_batches, T))
    size = T // n_batches
    if size < 1:
        return np.full(draws.shape[1:], np.nan)
    means = draws[: size * n_batches].reshape((n_batches, size) + draws.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def pip_estimate(sample: PosteriorSample, n_batches=50):
    """Posterior inclusion probabilities ``(C, p)`` and their Monte Carlo standard errors."""
    if sample.n_draws < 1:
        raise ValueError("empty posterior sample")
    inc = sample.include.astype(float)
    return inc.mean(axis=0), batch_means_se(inc, n_batches)


def sigma_posterior_summary(sample: PosteriorSample, level=0.9):
    """Posterior median and equal-tailed interval of ``sigma`` per chain."""
    sigma = np.sqrt(sample.sigma2)
    lo, med, hi = np.quantile(sigma, [(1 - level) / 2, 0.5, (1 + level) / 2], axis=0)
    return med, lo, hi


def predictive_draws(sample: PosteriorSample, X_new, rng, noise=True):
    """Posterior predictive draws ``(draws, C, m)`` at covariates ``X_new``
    (``(m, p)`` shared or ``(C, m, p)`` per chain)."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 2:
        mean = sample.beta0[..., None] + np.einsum("mj,tcj->tcm", X_new, sample.beta)
    else:
        mean = sample.beta0[..., None] + np.einsum("cmj,tcj->tcm", X_new, sample.beta)
    if not noise:
        return mean
    return mean + np.sqrt(sample.sigma2)[..., None] * rng.standard_normal(mean.shape)


def write_chain_csv(sample: PosteriorSample, path, chain=0):
    """Write one chain as CSV with one column per parameter."""
    p = sample.beta.shape[-1]
    header = ["beta0"] + [f"beta{j}" for j in range(1, p + 1)] + ["sigma2", "pi"] + [f"include{j}" for j in range(1, p + 1)]
    cols = np.column_stack([
        sample.beta0[:, chain], sample.beta[:, chain], sample.sigma2[:, chain], sample.pi[:, chain],
        sample.include[:, chain].astype(int),
    ])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in cols:
            w.writerow([repr(float(x)) for x in row])
