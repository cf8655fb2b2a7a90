"""Federated conditional β-VAE training with decoder-only synchronization and DP."""

from .config import ExperimentConfig
from .federation import FlConfig, RoundReport, TrainingResult, run_training
from .vae import ConditionalVAE, VaeConfig

__all__ = ["ExperimentConfig", "FlConfig", "RoundReport", "TrainingResult", "run_training",
           "ConditionalVAE", "VaeConfig"]
__version__ = "0.1.0"
