"""Pilot-aided OTFS channel estimation with grid evolution and off-grid sparse Bayesian learning."""

from .baselines import EstimatorSpec, Estimate, estimate_off_grid_uniform, estimate_on_grid, nmse_db, run_estimator
from .channel import ChannelRealization, DDPath, effective_channel, sample_channel, synthesize_observation
from .core import ConfigError, OtfsConfig, PilotConfig, derive_config, kernel_F, kernel_F_deriv, table1_config
from .dictionary import Dictionary, Grid, GridPoint, assemble, make_uniform_grid
from .evolution import GeConfig, GeResult, run_ge
from .sbl import PosteriorState, SblHyperParams, reconstruct, run_learning

__version__ = "0.1.0"

__all__ = [
    "ChannelRealization", "ConfigError", "DDPath", "Dictionary", "Estimate", "EstimatorSpec", "GeConfig",
    "GeResult", "Grid", "GridPoint", "OtfsConfig", "PilotConfig", "PosteriorState", "SblHyperParams",
    "assemble", "derive_config", "effective_channel", "estimate_off_grid_uniform", "estimate_on_grid",
    "kernel_F", "kernel_F_deriv", "make_uniform_grid", "nmse_db", "reconstruct", "run_estimator", "run_ge",
    "run_learning", "sample_channel", "synthesize_observation", "table1_config",
]
