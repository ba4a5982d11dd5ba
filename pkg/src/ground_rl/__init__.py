"""GRPO grounding laboratory: box rewards, group-relative policy optimisation
and a tabular token-level grounding policy."""

from .geometry import Box, ImageDims, center, iou, relative_box_size
from .grpo import AdvantageSet, LengthNorm, ObjectiveConfig, difficulty_weights, group_advantages
from .policy_env import GroundingSample, PolicyParams, generate_dataset, init_params, rollout_group
from .rewards import RewardBreakdown, RewardMode, RewardWeights, reward_combined
from .trainer import MetricsRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdvantageSet", "Box", "GroundingSample", "ImageDims", "LengthNorm", "MetricsRecord",
    "ObjectiveConfig", "PolicyParams", "RewardBreakdown", "RewardMode", "RewardWeights",
    "TrainConfig", "center", "difficulty_weights", "generate_dataset", "group_advantages",
    "init_params", "iou", "relative_box_size", "reward_combined", "rollout_group", "train",
]
