from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ..priors import IndependentPrior

logger = logging.getLogger(__name__)

BLOCK_SIZE = 1000


class ConfigError(ValueError):
    """Invalid model, design or batch configuration."""


class SimOutput(NamedTuple):
    data: np.ndarray
    latent: dict


class Simulator:
    """Forward model ``f(Y | theta)`` with a default prior and target map ``G``.

    Subclasses define ``param_names``, ``target_names``, ``default_prior``,
    ``simulate`` (vectorised over rows of ``theta``) and ``targets``.
    """

    name = ""
    param_names: tuple = ()
    target_names: tuple = ()

    def default_prior(self) -> IndependentPrior:
        raise NotImplementedError

    def simulate(self, theta, rng) -> SimOutput:
        raise NotImplementedError

    def targets(self, theta, latent) -> np.ndarray:
        raise NotImplementedError

    def sample_prior(self, rng, size):
        return self.default_prior().sample(rng, size)

    def get_config(self) -> dict:
        return {}

    def _theta(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != len(self.param_names):
            raise ConfigError(f"{self.name} expects {len(self.param_names)} parameters {self.param_names}, got {theta.shape[1]}")
        return theta

    def scenario(self, theta_true, n_replicates, rng) -> SimOutput:
        """Replicate datasets at one fixed parameter value."""
        theta = np.tile(np.asarray(theta_true, dtype=float), (n_replicates, 1))
        return self.simulate(theta, rng)


@dataclass
class SimBatch:
    """Training or validation records ``(theta_i, gamma_i, Y_i or Z_i, w_i)``."""

    theta: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray
    data: np.ndarray | None = None
    summaries: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.theta.shape[0]

    @property
    def inputs(self):
        return self.summaries if self.summaries is not None else self.data


def _block_seed(seed, stream, block):
    return np.random.SeedSequence([int(seed), int(stream), int(block)])


def _simulate_block(args):
    simulator, prior, training, seed, stream, block, size, reducer, keep_data = args
    rng = np.random.default_rng(_block_seed(seed, stream, block))
    theta = training.sample(rng, size)
    if training == prior:
        weights = np.ones(size)
    else:
        log_train = training.logpdf(theta)
        if not np.all(np.isfinite(log_train)):
            raise ConfigError("training distribution has zero density at a sampled theta")
        weights = np.exp(prior.logpdf(theta) - log_train)
    out = simulator.simulate(theta, rng)
    gamma = simulator.targets(theta, out.latent)
    summaries = reducer(out.data) if reducer is not None else None
    data = out.data if (keep_data or reducer is None) else None
    return theta, gamma, weights, data, summaries, out.data.shape[1:]


def make_sim_batch(simulator: Simulator, n, seed, prior=None, training=None, *,
                   reducer: Callable | None = None, keep_data=True, workers=1,
                   block_size=BLOCK_SIZE, stream=0) -> SimBatch:
    """Draw ``theta_i ~ training``, simulate ``Y_i`` and compute ``gamma_i`` and weights.

    Records are generated in fixed-size blocks, block ``b`` using the stream
    ``SeedSequence([seed, stream, b])``, so the result does not depend on
    ``workers``; distinct ``stream`` values give disjoint random streams.
    Weights are ``prior(theta) / training(theta)``; they are exactly 1 when
    the two distributions are the same.  ``reducer`` (a stateless summary
    map) is applied per block so raw datasets need not all be held in memory.
    """
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    prior = prior or simulator.default_prior()
    training = training or prior
    if training.names != prior.names:
        raise ConfigError("training distribution and prior must cover the same parameters")
    sizes = [min(block_size, n - s) for s in range(0, n, block_size)]
    jobs = [(simulator, prior, training, seed, stream, b, size, reducer, keep_data) for b, size in enumerate(sizes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_simulate_block, jobs))
    else:
        parts = []
        for b, job in enumerate(jobs):
            parts.append(_simulate_block(job))
            logger.debug("simulated block %d/%d", b + 1, len(jobs))

    def cat(i):
        if parts[0][i] is None:
            return None
        return np.concatenate([p[i] for p in parts])

    meta = {
        "model": simulator.name,
        "model_config": simulator.get_config(),
        "param_names": list(simulator.param_names),
        "target_names": list(simulator.target_names),
        "prior": prior.spec(),
        "training": training.spec(),
        "seed": int(seed),
        "stream": int(stream),
        "n": int(n),
        "block_size": int(block_size),
        "data_shape": [int(k) for k in parts[0][5]],
    }
    return SimBatch(cat(0), cat(1), cat(2), cat(3), cat(4), meta)
