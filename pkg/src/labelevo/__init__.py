"""Point-label evolution lab: synthetic scenes, a tiny U-Net and label-update rules."""
from .evolution import EvolutionConfig, EvolutionScheduler, evolve_labels
from .experiment import ExperimentConfig, run_experiment, sweep
from .net import LossConfig, NetworkSpec, build_network

__version__ = "0.1.0"
