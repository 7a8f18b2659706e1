"""Amortized neural posterior estimation with parametric posterior heads."""

__version__ = "0.1.0"

from .estimator import VariationalPosterior
from .families import FAMILIES, DomainError, get_family
from .network import Network, NetworkArch, TrainConfig, TrainingDiverged, train, weighted_nll
from .priors import IndependentPrior
from .simulators import ConfigError, SimBatch, build_simulator, make_sim_batch

__all__ = [
    "ConfigError", "DomainError", "FAMILIES", "IndependentPrior", "Network", "NetworkArch", "SimBatch",
    "TrainConfig", "TrainingDiverged", "VariationalPosterior", "build_simulator", "get_family",
    "make_sim_batch", "train", "weighted_nll",
]
