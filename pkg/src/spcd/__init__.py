"""Slow-fast persistent contrastive divergence: models, integrators, oracles
and the statistical checks around them."""

from .core import (
    Dataset,
    DimensionError,
    EnergyModel,
    MultiscaleConfig,
    SystemState,
    bar_e_eval,
    bar_e_grad_theta,
    bar_e_grad_z,
    neg_log_likelihood,
)
from .models import FlatModel, GaussianMeanModel, MoGModel, probe_dissipativity
from .integrators import (
    NoiseDraw,
    NoiseStream,
    averaged_step,
    chebyshev_amplification,
    em_step,
    frozen_step,
    run_trajectory,
    srock_step,
)
from .oracle import LinearOracle, stationary_cov, transient_moments

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DimensionError",
    "EnergyModel",
    "FlatModel",
    "GaussianMeanModel",
    "LinearOracle",
    "MoGModel",
    "MultiscaleConfig",
    "NoiseDraw",
    "NoiseStream",
    "SystemState",
    "averaged_step",
    "bar_e_eval",
    "bar_e_grad_theta",
    "bar_e_grad_z",
    "chebyshev_amplification",
    "em_step",
    "frozen_step",
    "neg_log_likelihood",
    "probe_dissipativity",
    "run_trajectory",
    "srock_step",
    "stationary_cov",
    "transient_moments",
]
