"""Amortized posterior estimation for PET kinetic parameters.

Simulates reference-tissue kinetics, samples reference posteriors with
random-walk Metropolis, trains three conditional VAE variants and compares
their posteriors with the MCMC reference.
"""

from .kinetics import ForwardModel, KineticParams, Measurement, NoiseModel
from .mcmc import McmcConfig, PosteriorSamples, run_chain
from .priors import PriorConfig, generate_dataset, make_setting
from .cvae import CvaeModel, TrainConfig, sample_posterior, train
from .evaluation import EvalReport, evaluate

__all__ = [
    "CvaeModel",
    "EvalReport",
    "ForwardModel",
    "KineticParams",
    "McmcConfig",
    "Measurement",
    "NoiseModel",
    "PosteriorSamples",
    "PriorConfig",
    "TrainConfig",
    "evaluate",
    "generate_dataset",
    "make_setting",
    "run_chain",
    "sample_posterior",
    "train",
]
__version__ = "0.1.0"
