"""Epidemic simulators: a deterministic-latent SIR with negative-binomial
observations, and a spatial SIR jump process simulated by binomial tau-leaping.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..priors import IndependentPrior
from .autologistic import check_adjacency, lattice_adjacency
from .base import ConfigError, SimOutput, Simulator


class SIRNonspatial(Simulator):
    """SIR ODE with observed infected counts ``I_t^obs ~ NegBin(mean I_t, dispersion psi)``.

    ``dS/dt = -lam S I / M``, ``dI/dt = lam S I / M - mu I``, ``dR/dt = mu I``
    integrated by fixed-step RK4; ``theta = (lam, mu, I0, psi)``.
    """

    name = "sir_nonspatial"
    param_names = ("lam", "mu", "I0", "psi")
    target_names = ("lam", "I0", "psi")

    def __init__(self, population=83e6, n_days=14, steps_per_day=100, mu=0.1):
        self.population = float(population)
        self.n_days = int(n_days)
        self.steps_per_day = int(steps_per_day)
        self.mu = mu

    def get_config(self):
        return {"population": self.population, "n_days": self.n_days,
                "steps_per_day": self.steps_per_day, "mu": self.mu}

    def default_prior(self):
        return IndependentPrior({
            "lam": {"dist": "lognorm", "s": 0.5, "scale": 0.4},
            "mu": {"fixed": self.mu},
            "I0": {"dist": "gamma", "a": 2.0, "scale": 20.0},
            "psi": {"dist": "expon", "scale": 5.0},
        })

    def scenario_theta(self):
        return np.array([0.4, 0.1, 20.0, 7.0])

    def _check(self, theta):
        lam, mu, i0, psi = theta.T
        if np.any(lam < 0) or np.any(mu <= 0) or np.any(psi <= 0) or np.any(i0 <= 0):
            raise ValueError("sir_nonspatial needs lam >= 0, mu > 0, psi > 0 and I0 > 0")

    def latent_path(self, theta):
        """``(S, I, R)`` at days ``0..n_days-1``, each of shape ``(B, n_days)``."""
        theta = self._theta(theta)
        self._check(theta)
        lam, mu, i0 = theta[:, 0], theta[:, 1], theta[:, 2]
        M = self.population
        state = np.stack([M - i0, i0, np.zeros_like(i0)])
        h = 1.0 / self.steps_per_day

        def deriv(s):
            inf = lam * s[0] * s[1] / M
            rec = mu * s[1]
            return np.stack([-inf, inf - rec, rec])

        path = [state]
        for _ in range(self.n_days - 1):
            for _ in range(self.steps_per_day):
                k1 = deriv(state)
                k2 = deriv(state + 0.5 * h * k1)
                k3 = deriv(state + 0.5 * h * k2)
                k4 = deriv(state + h * k3)
                state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            path.append(state)
        S, I, R = np.stack(path, axis=-1)
        return S, I, R

    def simulate(self, theta, rng):
        theta = self._theta(theta)
        S, I, R = self.latent_path(theta)
        psi = theta[:, 3:4]
        mean = np.maximum(I, 0.0)
        counts = rng.negative_binomial(np.broadcast_to(psi, mean.shape), psi / (psi + mean))
        return SimOutput(counts.astype(float), {"S": S, "I": I, "R": R})

    def targets(self, theta, latent):
        theta = self._theta(theta)
        return theta[:, [0, 2, 3]].copy()


class SIRSpatial(Simulator):
    """Spatial SIR on a set of regions with neighbour-driven infection.

    Per step of length ``dt`` each susceptible in region ``i`` is infected
    with probability ``min(1, dt * (beta_i Y_i + phi * sum_{j~i} Y_j) / M_i)``
    and each infected recovers with probability ``min(1, eta * dt / M_i)``
    (``recovery="population"``) or ``min(1, eta * dt)`` (``recovery="individual"``).
    Observed series are binomially thinned infected and recovered counts at
    ``n_obs`` evenly spaced times from 0 to ``obs_end``, stacked as
    ``(series, time, region)`` and flattened.

    With ``covariate`` given, the local rate is ``beta_i = exp(beta0 + X_i beta1)``
    and ``theta = (beta0, beta1, phi, eta)``; otherwise ``theta = (beta, phi, eta)``.
    """

    name = "sir_spatial"

    def __init__(self, grid=(10, 10), populations=None, adjacency=None, initial_cell=(6, 2),
                 initial_infected=10, dt=0.1, horizon=620.0, n_obs=21, obs_end=None, p_report=0.6,
                 target_time=619.0, covariate=None, eta=None, recovery="population"):
        self.grid = tuple(grid)
        self.A = check_adjacency(adjacency if adjacency is not None else lattice_adjacency(self.grid))
        self.n_regions = self.A.shape[0]
        if populations is None:
            populations = np.full(self.n_regions, 1000 // self.n_regions)
        self.M = np.asarray(populations, dtype=np.int64)
        if self.M.shape != (self.n_regions,) or np.any(self.M < 1):
            raise ConfigError("populations must be positive, one per region")
        if isinstance(initial_cell, (tuple, list)):
            self.initial_index = int(np.ravel_multi_index(tuple(initial_cell), self.grid))
        else:
            self.initial_index = int(initial_cell)
        self.initial_infected = int(min(initial_infected, self.M[self.initial_index]))
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.n_obs = int(n_obs)
        self.obs_end = self.horizon if obs_end is None else float(obs_end)
        if not 0 < self.obs_end <= self.horizon:
            raise ConfigError("obs_end must lie in (0, horizon]")
        self.obs_times = np.linspace(0.0, self.obs_end, self.n_obs)
        self.p_report = np.broadcast_to(np.asarray(p_report, dtype=float), (self.n_regions,)).copy()
        self.target_time = float(target_time)
        if not 0 <= self.target_time <= self.horizon:
            raise ConfigError("target_time must lie within the simulated horizon")
        if recovery not in ("population", "individual"):
            raise ConfigError("recovery must be 'population' or 'individual'")
        self.recovery = recovery
        self.covariate = None if covariate is None else np.asarray(covariate, dtype=float)
        self.eta = eta
        if self.covariate is not None:
            if self.covariate.shape != (self.n_regions,):
                raise ConfigError("covariate needs one value per region")
            self.param_names = ("beta0", "beta1", "phi", "eta")
            self.target_names = ("beta0", "beta1", "phi")
        else:
            self.param_names = ("beta", "phi", "eta")
            self.target_names = ("beta", "phi", "eta", "infected_at_target")

    def get_config(self):
        return {"grid": list(self.grid), "populations": self.M.tolist(), "dt": self.dt,
                "horizon": self.horizon, "n_obs": self.n_obs, "obs_end": self.obs_end, "p_report": self.p_report.tolist(),
                "target_time": self.target_time, "recovery": self.recovery,
                "covariate": None if self.covariate is None else self.covariate.tolist(), "eta": self.eta}

    @property
    def data_dim(self):
        return 2 * self.n_obs * self.n_regions

    def default_prior(self):
        if self.covariate is not None:
            eta = 0.5 if self.eta is None else self.eta
            return IndependentPrior({
                "beta0": {"dist": "uniform", "loc": -3.0, "scale": 4.0},
                "beta1": {"dist": "uniform", "loc": -1.0, "scale": 2.0},
                "phi": {"dist": "lognorm", "s": 1.0, "scale": float(np.exp(-2.0))},
                "eta": {"fixed": eta},
            })
        return IndependentPrior({k: {"dist": "uniform", "loc": 0.1, "scale": 0.8} for k in self.param_names})

    SCENARIOS = {1: (0.7, 0.8, 0.5), 2: (0.5, 0.3, 0.3)}

    def scenario_theta(self, setting=1):
        """True ``(beta, phi, eta)`` of the fast-spreading (1) or slower (2) scenario."""
        if self.covariate is not None:
            raise ConfigError("scenario settings are defined for the model without a covariate")
        try:
            return np.array(self.SCENARIOS[int(setting)], dtype=float)
        except KeyError:
            raise ConfigError(f"unknown scenario setting {setting!r}; expected one of {sorted(self.SCENARIOS)}") from None

    def _rates(self, theta):
        if self.covariate is not None:
            beta = np.exp(theta[:, 0][None, :] + self.covariate[:, None] * theta[:, 1][None, :])
            phi, eta = theta[:, 2], theta[:, 3]
        else:
            beta = np.broadcast_to(theta[:, 0][None, :], (self.n_regions, theta.shape[0]))
            phi, eta = theta[:, 1], theta[:, 2]
        return beta, phi, eta

    def _recovery_prob(self, eta, dt):
        M = self.M[:, None].astype(float)
        if self.recovery == "population":
            return np.minimum(1.0, eta[None, :] * dt / M)
        return np.broadcast_to(np.minimum(1.0, eta * dt)[None, :], (self.n_regions, eta.size))

    def step_size(self, theta):
        """Largest ``dt / 2**k`` keeping every per-step probability at or below 0.5."""
        theta = self._theta(theta)
        beta, phi, eta = self._rates(theta)
        M = self.M[:, None].astype(float)
        neighbour_pop = (self.A @ M)
        worst_inf = np.max((beta * M + phi[None, :] * neighbour_pop) / M)
        dt = self.dt
        while max(dt * worst_inf, float(np.max(self._recovery_prob(eta, dt)))) > 0.5:
            dt /= 2.0
        if dt != self.dt:
            warnings.warn(f"per-step probability above 0.5 at dt={self.dt}; using dt={dt}", RuntimeWarning)
        return dt

    def run_latent(self, theta, rng, dt=None):
        """Simulate the latent process; returns infected/recovered at the observation
        times, shape ``(B, n_obs, n)`` each, and total infected at ``target_time``."""
        theta = self._theta(theta)
        B = theta.shape[0]
        dt = self.step_size(theta) if dt is None else dt
        beta, phi, eta = self._rates(theta)
        M = self.M[:, None]
        n_steps = int(round(self.horizon / dt))
        obs_steps = {int(round(t / dt)): k for k, t in enumerate(self.obs_times)}
        target_step = int(round(self.target_time / dt))
        p_rec = self._recovery_prob(eta, dt)

        Y = np.zeros((self.n_regions, B), dtype=np.int64)
        Y[self.initial_index] = self.initial_infected
        X = np.broadcast_to(M, (self.n_regions, B)).copy()
        X[self.initial_index] -= self.initial_infected
        Z = np.zeros_like(Y)
        obs_Y = np.zeros((self.n_obs, self.n_regions, B), dtype=np.int64)
        obs_Z = np.zeros_like(obs_Y)
        at_target = np.zeros(B, dtype=np.int64)
        scale = dt / M.astype(float)

        for step in range(n_steps + 1):
            if step:
                pressure = beta * Y + phi[None, :] * (self.A @ Y)
                p_inf = np.minimum(1.0, scale * pressure)
                live = (X > 0) & (p_inf > 0)
                new_inf = np.zeros_like(X)
                new_inf[live] = rng.binomial(X[live], p_inf[live])
                sick = Y > 0
                new_rec = np.zeros_like(Y)
                new_rec[sick] = rng.binomial(Y[sick], p_rec[sick])
                X -= new_inf
                Y += new_inf - new_rec
                Z += new_rec
            if step in obs_steps:
                k = obs_steps[step]
                obs_Y[k] = Y
                obs_Z[k] = Z
            if step == target_step:
                at_target = Y.sum(axis=0)
            if not Y.any():
                # absorbed: nothing changes from here on
                for s, k in obs_steps.items():
                    if s > step:
                        obs_Y[k] = Y
                        obs_Z[k] = Z
                if target_step > step:
                    at_target = Y.sum(axis=0)
                break

        return obs_Y.transpose(2, 0, 1), obs_Z.transpose(2, 0, 1), at_target

    def simulate(self, theta, rng):
        theta = self._theta(theta)
        obs_Y, obs_Z, at_target = self.run_latent(theta, rng)
        p = self.p_report[None, None, :]
        seen_Y = rng.binomial(obs_Y, p)
        seen_Z = rng.binomial(obs_Z, p)
        data = np.stack([seen_Y, seen_Z], axis=1).reshape(theta.shape[0], -1).astype(np.int32)
        latent = {"infected_at_target": at_target, "Y": obs_Y, "Z": obs_Z}
        return SimOutput(data, latent)

    def targets(self, theta, latent):
        theta = self._theta(theta)
        cols = [self.param_names.index(k) for k in self.target_names if k in self.param_names]
        out = theta[:, cols]
        if "infected_at_target" in self.target_names:
            out = np.column_stack([out, latent["infected_at_target"]])
        return out.astype(float)
