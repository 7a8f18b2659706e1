"""Forward models, priors and simulated training batches."""

from .autologistic import Autologistic, gibbs_sample, greedy_coloring, lattice_adjacency, log_joint_unnormalized
from .base import ConfigError, SimBatch, SimOutput, Simulator, make_sim_batch
from .conjugate import ConjugateGaussian
from .regression import LinearRegression, SparseRegression, SpikeSlabPrior, draw_design, scenario_coefficients
from .sir import SIRNonspatial, SIRSpatial

MODELS = {
    cls.name: cls
    for cls in (ConjugateGaussian, LinearRegression, SparseRegression, Autologistic, SIRNonspatial, SIRSpatial)
}


def build_simulator(name, **kwargs) -> Simulator:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(MODELS)}") from None
    return cls(**kwargs)


__all__ = [
    "Autologistic", "ConfigError", "ConjugateGaussian", "LinearRegression", "MODELS", "SIRNonspatial",
    "SIRSpatial", "SimBatch", "SimOutput", "Simulator", "SparseRegression", "SpikeSlabPrior",
    "build_simulator", "draw_design", "gibbs_sample", "greedy_coloring", "lattice_adjacency",
    "log_joint_unnormalized", "make_sim_batch", "scenario_coefficients",
]
