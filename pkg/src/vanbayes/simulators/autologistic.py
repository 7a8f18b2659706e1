"""Centered autologistic model on a graph, simulated by blocked Gibbs sampling.

Full conditionals::

    logit P(Y_i = 1 | Y_-i) = logit(kappa_i) + phi * sum_{j ~ i} (Y_j - kappa_j)

with ``logit(kappa_i) = X_i' beta``.  Sites of one colour of a proper graph
colouring are conditionally independent given the rest, so each colour
class is updated at once; on a rook lattice this is the usual checkerboard.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.special import expit

from ..priors import IndependentPrior
from .base import ConfigError, SimOutput, Simulator


def lattice_adjacency(shape):
    """Rook adjacency of a ``rows x cols`` lattice (row-major site order)."""
    rows, cols = shape
    idx = np.arange(rows * cols).reshape(rows, cols)
    i = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    j = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    n = rows * cols
    A = sparse.coo_matrix((np.ones(i.size), (i, j)), shape=(n, n))
    return (A + A.T).tocsr()


def check_adjacency(A):
    A = sparse.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ConfigError(f"adjacency must be square, got {A.shape}")
    if (abs(A - A.T) > 0).nnz:
        raise ConfigError("adjacency must be symmetric")
    if A.diagonal().any():
        raise ConfigError("adjacency must have an empty diagonal")
    return A


def greedy_coloring(A):
    """Colour classes (index arrays) of a greedy proper colouring of ``A``."""
    A = sparse.csr_matrix(A)
    colors = np.full(A.shape[0], -1)
    for i in range(A.shape[0]):
        used = set(colors[A.indices[A.indptr[i] : A.indptr[i + 1]]])
        c = 0
        while c in used:
            c += 1
        colors[i] = c
    return [np.flatnonzero(colors == c) for c in range(colors.max() + 1)]


def gibbs_sample(kappa, phi, A, sweeps, rng, init=None, colors=None):
    """Run ``sweeps`` blocked Gibbs sweeps for a batch of fields.

    ``kappa`` is ``(B, n)``, ``phi`` is ``(B,)``; returns ``(B, n)`` in {0, 1}.
    """
    kappa = np.asarray(kappa, dtype=float)
    B, n = kappa.shape
    colors = colors if colors is not None else greedy_coloring(A)
    A = sparse.csr_matrix(A)
    # sites on rows, datasets on columns
    K = np.ascontiguousarray(kappa.T)
    logit_k = np.log(K) - np.log1p(-K)
    if init is None:
        Y = (rng.random((n, B)) < K).astype(float)
    else:
        Y = np.ascontiguousarray(np.asarray(init, dtype=float).T)
    phi = np.asarray(phi, dtype=float)[None, :]
    blocks = [(idx, A[idx]) for idx in colors]
    for _ in range(sweeps):
        for idx, A_rows in blocks:
            eta = logit_k[idx] + phi * (A_rows @ (Y - K))
            Y[idx] = rng.random((idx.size, B)) < expit(eta)
    return Y.T


def log_joint_unnormalized(y, kappa, phi, A):
    """Unnormalized log mass of configuration(s) ``y``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    logit_k = np.log(kappa) - np.log1p(-kappa)
    r = y - kappa
    A = sparse.csr_matrix(A)
    # each edge appears twice in A
    pair = 0.5 * np.einsum("bi,bi->b", r, (A @ r.T).T)
    return y @ logit_k + phi * pair


class Autologistic(Simulator):
    """Centered autologistic regression on a lattice.

    ``theta = (beta_1, ..., beta_p, log_phi)`` with ``beta_1`` the intercept;
    covariates ``X_i2..X_ip`` are standard normal and redrawn for each
    dataset unless a fixed design is supplied.  Datasets have shape
    ``(B, n, 1 + p)``: the binary response followed by ``X`` (intercept
    column included).
    """

    name = "autologistic"

    def __init__(self, shape=(20, 20), p=5, sweeps=500, adjacency=None, design=None):
        self.shape = tuple(shape)
        self.p = int(p)
        self.sweeps = int(sweeps)
        self.A = check_adjacency(adjacency if adjacency is not None else lattice_adjacency(self.shape))
        self.n_sites = self.A.shape[0]
        self.colors = greedy_coloring(self.A)
        self.design = None if design is None else np.asarray(design, dtype=float)
        if self.design is not None and self.design.shape != (self.n_sites, self.p):
            raise ConfigError(f"design must have shape {(self.n_sites, self.p)}, got {self.design.shape}")
        self.param_names = tuple(f"beta{j}" for j in range(1, self.p + 1)) + ("log_phi",)
        self.target_names = self.param_names

    def get_config(self):
        return {"shape": list(self.shape), "p": self.p, "sweeps": self.sweeps}

    def default_prior(self):
        return IndependentPrior({k: {"dist": "norm", "loc": 0.0, "scale": 1.0} for k in self.param_names})

    SCENARIO_LOG_PHI = {"low": -1.0, "high": 0.0}

    def scenario_theta(self, setting="low"):
        """Scenario truth: alternating-sign slopes of shrinking size with
        weak (``"low"``, ``phi = e^-1``) or moderate (``"high"``, ``phi = 1``) dependence."""
        if setting not in self.SCENARIO_LOG_PHI:
            raise ConfigError(f"unknown scenario setting {setting!r}; expected 'low' or 'high'")
        beta = np.zeros(self.p)
        j = np.arange(1, self.p)
        beta[1:] = (-1.0) ** (j + 1) * 0.5 / np.ceil(j / 2)
        return np.append(beta, self.SCENARIO_LOG_PHI[setting])

    def draw_design(self, rng, size):
        if self.design is not None:
            return np.broadcast_to(self.design, (size, self.n_sites, self.p)).copy()
        X = np.empty((size, self.n_sites, self.p))
        X[..., 0] = 1.0
        X[..., 1:] = rng.standard_normal((size, self.n_sites, self.p - 1))
        return X

    def simulate(self, theta, rng):
        theta = self._theta(theta)
        X = self.draw_design(rng, theta.shape[0])
        kappa = np.clip(expit(np.einsum("bnp,bp->bn", X, theta[:, : self.p])), 1e-12, 1 - 1e-12)
        phi = np.exp(theta[:, self.p])
        Y = gibbs_sample(kappa, phi, self.A, self.sweeps, rng, colors=self.colors)
        return SimOutput(np.concatenate([Y[..., None], X], axis=-1), {})

    def targets(self, theta, latent):
        return self._theta(theta).copy()
