"""Model-based reinforcement learning with ensemble-driven exploration and uncertainty-weighted exploitation.

A probabilistic dynamics ensemble generates short imagined rollouts for a soft
actor-critic agent. Real actions are chosen optimistically among perturbed
policy samples using ensemble disagreement, and imagined transitions are
down-weighted where the members disagree.
"""

from meee.config import ExperimentConfig, default_config, load_config
from meee.runner import evaluate_policy, run_experiment

__all__ = ["ExperimentConfig", "default_config", "evaluate_policy", "load_config", "run_experiment"]
__version__ = "0.1.0"
