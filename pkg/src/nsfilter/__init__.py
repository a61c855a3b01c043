"""Particle filtering for the 2D stochastic Navier-Stokes equations on the torus."""

from .config import ConfigError, ExperimentConfig, get_preset, presets
from .dynamics import Dynamics, GaussianPrior, IntegrationError, NoisePath, NoiseSpec, PathSegment, SolverConfig
from .enkf import EnsembleKalmanFilter, enkf_analysis
from .filtering import (DegenerateEnsembleError, Ensemble, FilterModel, ParticleFilter, PcnConfig,
                        TemperingError, TemperingRecord, ess, next_temperature, systematic_resample)
from .guidance import GuidanceOperator, GuidedDrift, girsanov_increment, importance_log_weight
from .harness import FilterStepError, aggregate_runs, run_experiment
from .observation import ObservationRecord, Observer, build_observer, generate_data, uniform_stations
from .spectral import Lattice

__version__ = "0.1.0"
