"""Group-robust training with probabilistic group membership.

Submodules:

* :mod:`pgdro.numerics` - small ReLU networks with per-sample-weighted gradients.
* :mod:`pgdro.data` - datasets and the synthetic spurious-correlation generator.
* :mod:`pgdro.grouping` - soft group labels and the pseudo-labelers that produce them.
* :mod:`pgdro.objectives` - robust risks and the group reweighting rule.
* :mod:`pgdro.training` - the training loop with worst-group model selection.
* :mod:`pgdro.cli` - command-line front end.
"""

from pgdro.data import Dataset, LabeledSubset, SyntheticParams, generate_synthetic
from pgdro.grouping import GroupSpace, env_to_group_probs, harden
from pgdro.numerics import Network, init_network
from pgdro.objectives import Objective, RobustState
from pgdro.training import MetricsReport, TrainConfig, TrainHistory, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GroupSpace",
    "LabeledSubset",
    "MetricsReport",
    "Network",
    "Objective",
    "RobustState",
    "SyntheticParams",
    "TrainConfig",
    "TrainHistory",
    "env_to_group_probs",
    "evaluate",
    "generate_synthetic",
    "harden",
    "init_network",
    "train",
]
