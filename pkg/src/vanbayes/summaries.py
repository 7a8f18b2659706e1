"""Summary statistics ``Z = S(Y)`` as scikit-learn transformers.

Stateless maps (least squares, Geary's C) work on whole batches of raw
datasets; stateful ones (rank transform, PCA) are fitted on the training
batch and then reused unchanged for validation and observed data.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse, stats
from scipy.sparse.csgraph import shortest_path
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .priors import make_distribution
from .simulators.autologistic import check_adjacency

LOG_SIGMA_FLOOR = 1e-8


class RankDeficientError(ValueError):
    """Design matrix without full column rank."""


# ---------------------------------------------------------------- least squares

def least_squares_fit(Y, X, rank_tol=1e-10):
    """Batched OLS with intercept.

    ``Y`` is ``(B, n)``, ``X`` is ``(B, n, p)``.  Returns coefficients
    ``(B, p + 1)`` (intercept first) and residual standard deviations ``(B,)``.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    B, n, p = X.shape
    D = np.concatenate([np.ones((B, n, 1)), X], axis=-1)
    Q, R = np.linalg.qr(D)
    diag = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    bad = diag <= rank_tol * np.maximum(diag.max(axis=-1, keepdims=True), 1e-300)
    if bad.any():
        rec, col = np.argwhere(bad)[0]
        name = "intercept" if col == 0 else f"X column {col}"
        raise RankDeficientError(f"design of dataset {rec} is rank deficient at {name}")
    qty = np.einsum("bnk,bn->bk", Q, Y)
    coef = np.linalg.solve(R, qty[..., None])[..., 0]
    resid = Y - np.einsum("bnk,bk->bn", D, coef)
    dof = n - p - 1
    rss = np.einsum("bn,bn->b", resid, resid)
    sigma = np.sqrt(rss / dof) if dof > 0 else np.zeros(B)
    return coef, sigma


class LeastSquaresSummary(TransformerMixin, BaseEstimator):
    """Least-squares coefficients and the log residual sd, optionally followed
    by the sd of the fitted slopes.

    Input datasets are ``(B, n, 1 + p)`` with the response in column 0.
    """

    def __init__(self, include_coef_sd=False, log_sigma_floor=LOG_SIGMA_FLOOR):
        self.include_coef_sd = include_coef_sd
        self.log_sigma_floor = log_sigma_floor

    def fit(self, data, y=None):
        return self

    def transform(self, data):
        data = np.asarray(data, dtype=float)
        if data.ndim != 3 or data.shape[-1] < 2:
            raise ValueError(f"expected datasets of shape (B, n, 1 + p), got {data.shape}")
        coef, sigma = least_squares_fit(data[..., 0], data[..., 1:])
        cols = [coef, np.log(np.maximum(sigma, self.log_sigma_floor))[:, None]]
        if self.include_coef_sd:
            slopes = coef[:, 1:]
            sd = slopes.std(axis=1, ddof=1) if slopes.shape[1] > 1 else np.zeros(len(coef))
            cols.append(sd[:, None])
        return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------- rank transform

class RankToUnit(TransformerMixin, BaseEstimator):
    """Per-coordinate empirical-CDF map onto ``[-1, 1]``.

    A training value with average rank ``r`` among ``N`` maps to
    ``(2r - N - 1) / N``; other values use the same formula with the
    average of their strict and weak rank, which clamps to ``-1`` below the
    training minimum and ``+1`` above the maximum.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.sorted_ = np.sort(X, axis=0)
        self.n_samples_fit_ = X.shape[0]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "sorted_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        N = self.n_samples_fit_
        out = np.empty_like(X)
        for j in range(X.shape[1]):
            col = self.sorted_[:, j]
            below = np.searchsorted(col, X[:, j], side="left")
            upto = np.searchsorted(col, X[:, j], side="right")
            r = (below + upto + 1) / 2.0
            out[:, j] = (2.0 * r - N - 1.0) / N
        return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------- Geary's C

def order_weights(A, orders=(1, 2, 3)):
    """Indicator matrices of pairs at graph distance exactly ``k``."""
    A = check_adjacency(A)
    dist = shortest_path(A, unweighted=True, directed=False)
    return [sparse.csr_matrix((dist == k).astype(float)) for k in orders]


def geary_c(x, W):
    """Geary's C for each row of ``x`` (``(B, n)``) under weights ``W``.

    Returns ``(C, degenerate)``; rows with zero variance get ``C = 1`` and
    ``degenerate = True``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    W = sparse.csr_matrix(W)
    n = x.shape[1]
    total = W.sum()
    row = np.asarray(W.sum(axis=1)).ravel()
    Wx = (W @ x.T).T
    # sum_ij w_ij (x_i - x_j)^2 for symmetric W
    num = 2.0 * (np.einsum("bi,i,bi->b", x, row, x) - np.einsum("bi,bi->b", x, Wx))
    dev = x - x.mean(axis=1, keepdims=True)
    ss = np.einsum("bi,bi->b", dev, dev)
    degenerate = ss <= 1e-12 * np.maximum(1.0, np.einsum("bi,bi->b", x, x))
    C = np.ones(x.shape[0])
    ok = ~degenerate
    C[ok] = (n - 1) * num[ok] / (2.0 * total * ss[ok])
    return C, degenerate


def fit_logistic_batch(y, X, iters=30, ridge=1e-6, bound=10.0):
    """Batched logistic regression by damped Newton steps.

    ``y`` is ``(B, n)`` in {0, 1}, ``X`` is ``(B, n, p)`` including any
    intercept column.  A small ridge keeps separable data finite and the
    estimates are clipped to ``[-bound, bound]``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    B, n, p = X.shape
    beta = np.zeros((B, p))
    eye = np.eye(p)
    for _ in range(iters):
        mu = expit(np.einsum("bnp,bp->bn", X, beta))
        grad = np.einsum("bnp,bn->bp", X, y - mu) - ridge * beta
        w = mu * (1.0 - mu)
        H = np.einsum("bnp,bn,bnq->bpq", X, w, X) + ridge * eye
        step = np.linalg.solve(H, grad[..., None])[..., 0]
        beta = np.clip(beta + step, -bound, bound)
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


class AutologisticSummary(TransformerMixin, BaseEstimator):
    """Logistic-regression estimates plus Geary's C of the GLM residuals at
    each neighbour order, and one flag column marking zero-variance residuals.

    Input datasets are ``(B, n, 1 + p)``: binary response then covariates
    (intercept column included).
    """

    def __init__(self, adjacency=None, orders=(1, 2, 3)):
        self.adjacency = adjacency
        self.orders = orders

    def fit(self, data, y=None):
        self.weights_ = order_weights(self.adjacency, self.orders)
        return self

    def transform(self, data):
        check_is_fitted(self, "weights_")
        data = np.asarray(data, dtype=float)
        y, X = data[..., 0], data[..., 1:]
        beta = fit_logistic_batch(y, X)
        resid = y - expit(np.einsum("bnp,bp->bn", X, beta))
        cols, flag = [beta], np.zeros(len(data), dtype=bool)
        for W in self.weights_:
            C, degenerate = geary_c(resid, W)
            cols.append(C[:, None])
            flag |= degenerate
        cols.append(flag[:, None].astype(float))
        return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------- PCA

class PCASummary(TransformerMixin, BaseEstimator):
    """Principal-component scores from a streamed two-pass covariance.

    Exactly one of ``n_components`` and ``variance_target`` selects the
    number of scores; with a variance target the smallest count whose
    cumulative explained fraction reaches it is used.
    """

    def __init__(self, n_components=None, variance_target=None, block_size=1000, rank_tol=1e-10):
        self.n_components = n_components
        self.variance_target = variance_target
        self.block_size = block_size
        self.rank_tol = rank_tol

    def _blocks(self, X):
        for s in range(0, X.shape[0], self.block_size):
            yield np.asarray(X[s : s + self.block_size], dtype=float)

    def fit(self, X, y=None):
        if (self.n_components is None) == (self.variance_target is None):
            raise ValueError("set exactly one of n_components and variance_target")
        X = np.asarray(X)
        X = X.reshape(X.shape[0], -1)
        N, d = X.shape
        if N < 2:
            raise ValueError("PCA needs at least two datasets")
        total = np.zeros(d)
        for blk in self._blocks(X):
            total += blk.sum(axis=0)
        mean = total / N
        cov = np.zeros((d, d))
        for blk in self._blocks(X):
            c = blk - mean
            cov += c.T @ c
        cov /= N - 1
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        rank = int(np.sum(evals > self.rank_tol * max(evals[0], 1e-300)))
        ratio = evals / evals.sum() if evals.sum() > 0 else np.zeros_like(evals)
        if self.variance_target is not None:
            if not 0 < self.variance_target <= 1:
                raise ValueError("variance_target must be in (0, 1]")
            m = int(np.searchsorted(np.cumsum(ratio), self.variance_target - 1e-12) + 1)
            m = min(m, max(rank, 1))
        else:
            m = int(self.n_components)
            if m < 1 or m > rank:
                raise ValueError(f"n_components={m} exceeds the covariance rank {rank}")
        # fix the sign so the largest-magnitude loading of each column is positive
        comps = evecs[:, :m]
        flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(m)])
        self.mean_ = mean
        self.components_ = comps * flip
        self.explained_variance_ = evals[:m]
        self.explained_variance_ratio_ = ratio[:m]
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=float)
        X = X.reshape(X.shape[0], -1)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_

    def inverse_transform(self, scores):
        check_is_fitted(self, "components_")
        return self.mean_ + np.asarray(scores, dtype=float) @ self.components_.T


# ---------------------------------------------------------------- prior quantile map

CDF_CLAMP = 1e-12


class PriorQuantileTransform(TransformerMixin, BaseEstimator):
    """Map each column through ``Phi^{-1}(F(x))`` where ``F`` is its prior CDF.

    ``distributions`` holds one distribution spec per column, in the format
    of :func:`vanbayes.priors.make_distribution`.
    CDF values are clamped to ``[1e-12, 1 - 1e-12]``; :meth:`transform_with_flags`
    reports which entries were clamped.
    """

    def __init__(self, distributions=()):
        self.distributions = distributions

    def fit(self, X=None, y=None):
        self.n_features_in_ = len(self.distributions)
        return self

    @property
    def _dists(self):
        return [make_distribution(d) for d in self.distributions]

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        X2 = X.reshape(-1, 1) if X.ndim == 1 else X
        if X2.shape[1] != len(self.distributions):
            raise ValueError(f"expected {len(self.distributions)} columns, got {X2.shape[1]}")
        return X, X2

    def transform_with_flags(self, X):
        X, X2 = self._check(X)
        u = np.column_stack([d.cdf(X2[:, j]) for j, d in enumerate(self._dists)])
        clamped = (u < CDF_CLAMP) | (u > 1 - CDF_CLAMP)
        out = stats.norm.ppf(np.clip(u, CDF_CLAMP, 1 - CDF_CLAMP))
        return out.reshape(X.shape), clamped.reshape(X.shape)

    def transform(self, X):
        return self.transform_with_flags(X)[0]

    def inverse_transform(self, Xt):
        Xt, X2 = self._check(Xt)
        out = np.column_stack([d.ppf(stats.norm.cdf(X2[:, j])) for j, d in enumerate(self._dists)])
        return out.reshape(Xt.shape)

    def log_jacobian(self, X):
        """``log |d transform / dx|`` elementwise."""
        X, X2 = self._check(X)
        t = self.transform(X2)
        out = np.column_stack([d.logpdf(X2[:, j]) for j, d in enumerate(self._dists)]) - stats.norm.logpdf(t)
        return out.reshape(X.shape)


class FlattenCounts(TransformerMixin, BaseEstimator):
    """Flatten datasets to rows, optionally through ``log1p`` for count data."""

    def __init__(self, log1p=False):
        self.log1p = log1p

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        X = X.reshape(X.shape[0], -1)
        return np.log1p(X) if self.log1p else X
