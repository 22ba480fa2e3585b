"""Seedable multi-agent RL on social dilemmas with tabular softmax policies.

Games: iterated prisoner's dilemma, Split No-Comm and Trust-and-Split.
Trainers: multi-agent GRPO, its sum-of-rewards variant, and Advantage
Alignment with a past-self opponent buffer.
"""

__version__ = "0.1.0"

from .advantage import align_advantages, loo_advantages
from .core import EpisodeSpec, discounted_returns, make_crn_batch, make_eval_specs, run_batch, run_episode
from .envs import EnvId, make_game, split_allocation
from .errors import ConfigurationError, InternalError, InvalidProposalError, StepAborted
from .evaluation import (
    cross_play, exploitability_report, grim_probe_split, reciprocity_probe_ipd, split_efficiency,
    tas_behavior_probe,
)
from .policy import TabularPolicy, builtin_policy, load_policy, save_policy, truthful_cooperator
from .training import TrainConfig, train, train_vs_frozen

__all__ = [
    "__version__", "align_advantages", "loo_advantages", "EpisodeSpec", "discounted_returns",
    "make_crn_batch", "make_eval_specs", "run_batch", "run_episode", "EnvId", "make_game",
    "split_allocation", "ConfigurationError", "InternalError", "InvalidProposalError", "StepAborted",
    "cross_play", "exploitability_report", "grim_probe_split", "reciprocity_probe_ipd",
    "split_efficiency", "tas_behavior_probe", "TabularPolicy", "builtin_policy", "load_policy",
    "save_policy", "truthful_cooperator", "TrainConfig", "train", "train_vs_frozen",
]
