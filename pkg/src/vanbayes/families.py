"""Parametric posterior families driven by unconstrained network outputs.

Every family consumes a ``raw`` array whose last axis holds ``n_raw``
unconstrained reals and maps it to valid natural parameters through fixed
link functions.  Scale-type parameters use ``exp`` clamped to
``[SCALE_MIN, SCALE_MAX]``; probabilities use the logistic link clamped to
``[PROB_MIN, 1 - PROB_MIN]``.  The clamps act on the raw value, so the
gradient of a clamped coordinate is exactly zero.

All methods broadcast ``gamma`` against ``raw.shape[:-1]``.
"""

from __future__ import annotations

import numpy as np
from scipy import special

SCALE_MIN = 1e-6
SCALE_MAX = 1e6
PROB_MIN = 1e-7

_LOG_SCALE_MIN = np.log(SCALE_MIN)
_LOG_SCALE_MAX = np.log(SCALE_MAX)
_LOGIT_MIN = float(special.logit(PROB_MIN))
_LOGIT_MAX = -_LOGIT_MIN
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_BISECT_ITERS = 64


class DomainError(ValueError):
    """A value lies outside the support or domain of a family."""


def _log_scale_link(r):
    r = np.asarray(r, dtype=float)
    clipped = np.clip(r, _LOG_SCALE_MIN, _LOG_SCALE_MAX)
    # NaN raw values must not pass silently as "inside"
    inside = (r >= _LOG_SCALE_MIN) & (r <= _LOG_SCALE_MAX)
    return np.exp(clipped), inside


def _log_or_clip(x):
    with np.errstate(divide="ignore"):
        return np.clip(np.log(np.asarray(x, dtype=float)), _LOG_SCALE_MIN, _LOG_SCALE_MAX)


def _bisect(cdf, lo, hi, q, iters=_BISECT_ITERS):
    """Vectorised bisection for ``cdf(x) = q`` on the bracket ``[lo, hi]``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _check_q(q):
    q = np.asarray(q, dtype=float)
    if np.any(~((q > 0.0) & (q < 1.0))):
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    return q


def _weighted_moments(gamma, weights):
    gamma = np.asarray(gamma, dtype=float)
    w = np.ones_like(gamma) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        w = np.ones_like(gamma)
        total = w.sum()
    mean = float((w * gamma).sum() / total)
    var = float((w * (gamma - mean) ** 2).sum() / total)
    return mean, var


class Family:
    """Base class; subclasses implement one parametric posterior family."""

    name: str = ""
    n_raw: int = 0
    discrete: bool = False
    param_names: tuple = ()

    def __repr__(self):
        return f"{type(self).__name__}()"

    def _split(self, raw):
        raw = np.asarray(raw, dtype=float)
        if raw.shape[-1:] != (self.n_raw,):
            raise ValueError(
                f"{self.name} expects raw outputs with last axis {self.n_raw}, got shape {raw.shape}"
            )
        return [raw[..., i] for i in range(self.n_raw)]

    def natural(self, raw) -> dict:
        raise NotImplementedError

    def to_raw(self, **natural) -> np.ndarray:
        raise NotImplementedError

    def check_support(self, gamma):
        raise NotImplementedError

    def log_density(self, raw, gamma):
        raise NotImplementedError

    def grad_raw(self, raw, gamma):
        """Derivative of ``log_density`` with respect to ``raw``."""
        raise NotImplementedError

    def cdf(self, raw, gamma):
        raise NotImplementedError

    def quantile(self, raw, q):
        raise NotImplementedError

    def sample(self, raw, rng, size=None):
        raise NotImplementedError

    def mean(self, raw):
        raise NotImplementedError

    def init_raw(self, gamma, weights=None) -> np.ndarray:
        """Raw values matching the (weighted) marginal moments of ``gamma``."""
        raise NotImplementedError

    def median(self, raw):
        return self.quantile(raw, 0.5)


class HetNormal(Family):
    """Normal with mean ``raw[0]`` and sd ``exp(raw[1])``."""

    name = "het_normal"
    n_raw = 2
    param_names = ("mean", "sd")

    def natural(self, raw):
        mu, s = self._split(raw)
        return {"mean": mu, "sd": _log_scale_link(s)[0]}

    def to_raw(self, mean, sd):
        mean, sd = np.broadcast_arrays(np.asarray(mean, float), np.asarray(sd, float))
        return np.stack([mean, _log_or_clip(sd)], axis=-1)

    def check_support(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if not np.all(np.isfinite(gamma)):
            raise DomainError(f"het_normal requires finite values, got {gamma[~np.isfinite(gamma)][:5]}")
        return gamma

    def log_density(self, raw, gamma):
        gamma = self.check_support(gamma)
        mu, s = self._split(raw)
        sd, _ = _log_scale_link(s)
        z = (gamma - mu) / sd
        return -_HALF_LOG_2PI - np.log(sd) - 0.5 * z * z

    def grad_raw(self, raw, gamma):
        gamma = self.check_support(gamma)
        mu, s = self._split(raw)
        sd, inside = _log_scale_link(s)
        z = (gamma - mu) / sd
        d_mu = z / sd
        d_s = np.where(inside, z * z - 1.0, 0.0)
        return np.stack(np.broadcast_arrays(d_mu, d_s), axis=-1)

    def cdf(self, raw, gamma):
        gamma = self.check_support(gamma)
        nat = self.natural(raw)
        return special.ndtr((gamma - nat["mean"]) / nat["sd"])

    def quantile(self, raw, q):
        q = _check_q(q)
        nat = self.natural(raw)
        shape = np.broadcast_shapes(q.shape, nat["mean"].shape)
        x = _bisect(special.ndtr, np.full(shape, -40.0), np.full(shape, 40.0), q)
        return nat["mean"] + nat["sd"] * x

    def sample(self, raw, rng, size=None):
        nat = self.natural(raw)
        return rng.normal(nat["mean"], nat["sd"], size=size)

    def mean(self, raw):
        return self.natural(raw)["mean"]

    def init_raw(self, gamma, weights=None):
        mean, var = _weighted_moments(gamma, weights)
        return self.to_raw(mean, np.sqrt(max(var, SCALE_MIN**2)))


class LogNormal(Family):
    """Log-normal whose log has mean ``raw[0]`` and sd ``exp(raw[1])``."""

    name = "log_normal"
    n_raw = 2
    param_names = ("meanlog", "sdlog")

    def natural(self, raw):
        mu, s = self._split(raw)
        return {"meanlog": mu, "sdlog": _log_scale_link(s)[0]}

    def to_raw(self, meanlog, sdlog):
        meanlog, sdlog = np.broadcast_arrays(np.asarray(meanlog, float), np.asarray(sdlog, float))
        return np.stack([meanlog, _log_or_clip(sdlog)], axis=-1)

    def check_support(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        bad = ~(np.isfinite(gamma) & (gamma > 0))
        if np.any(bad):
            raise DomainError(f"log_normal requires positive values, got {gamma[bad][:5]}")
        return gamma

    def log_density(self, raw, gamma):
        gamma = self.check_support(gamma)
        return _NORMAL.log_density(raw, np.log(gamma)) - np.log(gamma)

    def grad_raw(self, raw, gamma):
        gamma = self.check_support(gamma)
        return _NORMAL.grad_raw(raw, np.log(gamma))

    def cdf(self, raw, gamma):
        gamma = self.check_support(gamma)
        return _NORMAL.cdf(raw, np.log(gamma))

    def quantile(self, raw, q):
        return np.exp(_NORMAL.quantile(raw, q))

    def sample(self, raw, rng, size=None):
        nat = self.natural(raw)
        return rng.lognormal(nat["meanlog"], nat["sdlog"], size=size)

    def mean(self, raw):
        nat = self.natural(raw)
        return np.exp(nat["meanlog"] + 0.5 * nat["sdlog"] ** 2)

    def init_raw(self, gamma, weights=None):
        return _NORMAL.init_raw(np.log(self.check_support(gamma)), weights)


class BernoulliLogit(Family):
    """Bernoulli with success probability ``expit(raw[0])``."""

    name = "bernoulli_logit"
    n_raw = 1
    discrete = True
    param_names = ("prob",)

    def _logit(self, raw):
        (l,) = self._split(raw)
        inside = (l >= _LOGIT_MIN) & (l <= _LOGIT_MAX)
        return np.clip(l, _LOGIT_MIN, _LOGIT_MAX), inside

    def natural(self, raw):
        # clip again: expit(logit(PROB_MIN)) can round one ulp below the bound
        return {"prob": np.clip(special.expit(self._logit(raw)[0]), PROB_MIN, 1.0 - PROB_MIN)}

    def to_raw(self, prob):
        prob = np.clip(np.asarray(prob, dtype=float), PROB_MIN, 1.0 - PROB_MIN)
        return special.logit(prob)[..., None]

    def check_support(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        bad = ~((gamma == 0) | (gamma == 1))
        if np.any(bad):
            raise DomainError(f"bernoulli_logit requires values in {{0, 1}}, got {gamma[bad][:5]}")
        return gamma

    def log_density(self, raw, gamma):
        gamma = self.check_support(gamma)
        l, _ = self._logit(raw)
        # log p = -log1p(e^{-l}), log(1-p) = -log1p(e^{l})
        return -np.logaddexp(0.0, np.where(gamma == 1, -l, l))

    def grad_raw(self, raw, gamma):
        gamma = self.check_support(gamma)
        l, inside = self._logit(raw)
        return np.where(inside, gamma - special.expit(l), 0.0)[..., None]

    def cdf(self, raw, gamma):
        gamma = np.asarray(gamma, dtype=float)
        p = self.natural(raw)["prob"]
        return np.where(gamma < 0, 0.0, np.where(gamma < 1, 1.0 - p, 1.0))

    def quantile(self, raw, q):
        q = _check_q(q)
        p = self.natural(raw)["prob"]
        return np.where(1.0 - p >= q, 0, 1)

    def sample(self, raw, rng, size=None):
        return rng.binomial(1, self.natural(raw)["prob"], size=size)

    def mean(self, raw):
        return self.natural(raw)["prob"]

    def init_raw(self, gamma, weights=None):
        mean, _ = _weighted_moments(self.check_support(gamma), weights)
        return self.to_raw(mean)


class NegBinomialMeanDisp(Family):
    """Negative binomial with mean ``exp(raw[0])`` and dispersion ``exp(raw[1])``.

    ``Var = mean + mean**2 / dispersion``.
    """

    name = "neg_binomial"
    n_raw = 2
    discrete = True
    param_names = ("mean", "dispersion")

    def natural(self, raw):
        r_mu, r_k = self._split(raw)
        return {"mean": _log_scale_link(r_mu)[0], "dispersion": _log_scale_link(r_k)[0]}

    def to_raw(self, mean, dispersion):
        mean, dispersion = np.broadcast_arrays(np.asarray(mean, float), np.asarray(dispersion, float))
        return np.stack([_log_or_clip(mean), _log_or_clip(dispersion)], axis=-1)

    def check_support(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        bad = ~(np.isfinite(gamma) & (gamma >= 0) & (gamma == np.floor(gamma)))
        if np.any(bad):
            raise DomainError(f"neg_binomial requires nonnegative integers, got {gamma[bad][:5]}")
        return gamma

    def log_density(self, raw, gamma):
        y = self.check_support(gamma)
        nat = self.natural(raw)
        mu, k = nat["mean"], nat["dispersion"]
        log_denom = np.log(k + mu)
        return (
            special.gammaln(y + k)
            - special.gammaln(k)
            - special.gammaln(y + 1.0)
            + k * (np.log(k) - log_denom)
            + y * (np.log(mu) - log_denom)
        )

    def grad_raw(self, raw, gamma):
        y = self.check_support(gamma)
        r_mu, r_k = self._split(raw)
        mu, in_mu = _log_scale_link(r_mu)
        k, in_k = _log_scale_link(r_k)
        d_mu = np.where(in_mu, k * (y - mu) / (k + mu), 0.0)
        d_k = k * (
            special.digamma(y + k) - special.digamma(k) + np.log(k / (k + mu)) + 1.0 - (k + y) / (k + mu)
        )
        d_k = np.where(in_k, d_k, 0.0)
        return np.stack(np.broadcast_arrays(d_mu, d_k), axis=-1)

    def _cdf_unchecked(self, mu, k, y):
        y = np.floor(y)
        with np.errstate(invalid="ignore"):
            val = special.betainc(k, np.maximum(y, 0.0) + 1.0, k / (k + mu))
        return np.where(y < 0, 0.0, val)

    def cdf(self, raw, gamma):
        gamma = np.asarray(gamma, dtype=float)
        nat = self.natural(raw)
        return self._cdf_unchecked(nat["mean"], nat["dispersion"], gamma)

    def quantile(self, raw, q):
        q = _check_q(q)
        nat = self.natural(raw)
        mu, k = np.broadcast_arrays(nat["mean"], nat["dispersion"])
        q, mu, k = np.broadcast_arrays(q, mu, k)
        sd = np.sqrt(mu + mu * mu / k)
        hi = np.ceil(mu + 10.0 * sd + 10.0)
        while True:
            short = self._cdf_unchecked(mu, k, hi) < q
            if not np.any(short):
                break
            hi = np.where(short, 2.0 * hi, hi)
        lo = np.full_like(hi, -1.0)
        # invariant: cdf(lo) < q <= cdf(hi)
        while np.any(hi - lo > 1):
            mid = np.floor(0.5 * (lo + hi))
            ok = self._cdf_unchecked(mu, k, mid) >= q
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
        return hi.astype(np.int64)

    def sample(self, raw, rng, size=None):
        nat = self.natural(raw)
        mu, k = nat["mean"], nat["dispersion"]
        return rng.negative_binomial(k, k / (k + mu), size=size)

    def mean(self, raw):
        return self.natural(raw)["mean"]

    def init_raw(self, gamma, weights=None):
        mean, var = _weighted_moments(self.check_support(gamma), weights)
        mean = max(mean, SCALE_MIN)
        excess = var - mean
        k = mean * mean / excess if excess > 0 else SCALE_MAX
        return self.to_raw(mean, k)


class GammaShapeRate(Family):
    """Gamma with shape ``exp(raw[0])`` and rate ``exp(raw[1])``."""

    name = "gamma"
    n_raw = 2
    param_names = ("shape", "rate")

    def natural(self, raw):
        r_a, r_b = self._split(raw)
        return {"shape": _log_scale_link(r_a)[0], "rate": _log_scale_link(r_b)[0]}

    def to_raw(self, shape, rate):
        shape, rate = np.broadcast_arrays(np.asarray(shape, float), np.asarray(rate, float))
        return np.stack([_log_or_clip(shape), _log_or_clip(rate)], axis=-1)

    def check_support(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        bad = ~(np.isfinite(gamma) & (gamma > 0))
        if np.any(bad):
            raise DomainError(f"gamma requires positive values, got {gamma[bad][:5]}")
        return gamma

    def log_density(self, raw, gamma):
        x = self.check_support(gamma)
        nat = self.natural(raw)
        a, b = nat["shape"], nat["rate"]
        return a * np.log(b) - special.gammaln(a) + (a - 1.0) * np.log(x) - b * x

    def grad_raw(self, raw, gamma):
        x = self.check_support(gamma)
        r_a, r_b = self._split(raw)
        a, in_a = _log_scale_link(r_a)
        b, in_b = _log_scale_link(r_b)
        d_a = np.where(in_a, a * (np.log(b) - special.digamma(a) + np.log(x)), 0.0)
        d_b = np.where(in_b, a - b * x, 0.0)
        return np.stack(np.broadcast_arrays(d_a, d_b), axis=-1)

    def cdf(self, raw, gamma):
        gamma = np.asarray(gamma, dtype=float)
        nat = self.natural(raw)
        return np.where(gamma > 0, special.gammainc(nat["shape"], nat["rate"] * np.maximum(gamma, 0.0)), 0.0)

    def quantile(self, raw, q):
        q = _check_q(q)
        nat = self.natural(raw)
        a, b = nat["shape"], nat["rate"]
        q, a, b = np.broadcast_arrays(q, a, b)
        lo = np.full(q.shape, -745.0)
        hi = np.log(a + 50.0 * np.sqrt(a) + 50.0)
        log_x = _bisect(lambda t: special.gammainc(a, np.exp(t)), lo, hi, q)
        return np.exp(log_x) / b

    def sample(self, raw, rng, size=None):
        nat = self.natural(raw)
        return rng.gamma(nat["shape"], 1.0 / nat["rate"], size=size)

    def mean(self, raw):
        nat = self.natural(raw)
        return nat["shape"] / nat["rate"]

    def init_raw(self, gamma, weights=None):
        mean, var = _weighted_moments(self.check_support(gamma), weights)
        var = max(var, SCALE_MIN * mean * mean)
        return self.to_raw(mean * mean / var, mean / var)


_NORMAL = HetNormal()

FAMILIES = {
    f.name: f
    for f in (_NORMAL, LogNormal(), BernoulliLogit(), NegBinomialMeanDisp(), GammaShapeRate())
}


def get_family(name) -> Family:
    """Look up a family by its stable lowercase name (instances pass through)."""
    if isinstance(name, Family):
        return name
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}") from None
