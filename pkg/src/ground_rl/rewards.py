"""Rule-based grounding rewards and their weighted combination.

A prediction is either a :class:`~ground_rl.geometry.Box` or ``None``, the
latter meaning the response could not be parsed (format failure).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum

from .geometry import Box, ImageDims, center, contains_point, iou

BOX_EPSILON = 1e-6

# Per-function call counts; lets callers verify that a reward mode never
# touches the components it is not supposed to read.
call_counts: Counter[str] = Counter()


class RewardMode(str, Enum):
    HIT_ONLY = "hit-only"
    IOU_ONLY = "iou-only"
    HIT_PLUS_IOU = "hit+iou"
    COMBINED = "combined"


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.25
    beta: float = 0.125

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"reward weights must be non-negative: {self}")

    @property
    def max_total(self) -> float:
        return 1.0 + self.alpha + self.beta


@dataclass(frozen=True)
class RewardBreakdown:
    """Reward components of one prediction.

    Components that a reward mode did not compute are ``None``.
    """

    r_hit: float | None
    r_iou: float | None
    r_box: float | None
    format_ok: bool
    total: float


FORMAT_FAILURE = RewardBreakdown(0.0, 0.0, 0.0, False, 0.0)


def reward_hit(pred: Box, gt: Box) -> float:
    call_counts["hit"] += 1
    x, y = center(pred)
    return 1.0 if contains_point(gt, x, y) else 0.0


def reward_iou(pred: Box, gt: Box) -> float:
    call_counts["iou"] += 1
    return iou(pred, gt)


def reward_box(pred: Box, gt: Box, dims: ImageDims) -> float:
    """Edge-agreement reward ``4 / sum_e 1/(1 - d_e)``.

    ``d_e`` is the absolute deviation of edge ``e`` normalised by the image
    extent along that axis. Equals 1 only for an exact match; returns 0 once any
    deviation reaches ``1 - BOX_EPSILON``.
    """
    call_counts["box"] += 1
    deviations = (
        abs(pred.x1 - gt.x1) / dims.width,
        abs(pred.x2 - gt.x2) / dims.width,
        abs(pred.y1 - gt.y1) / dims.height,
        abs(pred.y2 - gt.y2) / dims.height,
    )
    if max(deviations) >= 1.0 - BOX_EPSILON:
        return 0.0
    return 4.0 / sum(1.0 / (1.0 - d) for d in deviations)


def reward_combined(
    parsed: Box | None,
    gt: Box,
    dims: ImageDims,
    weights: RewardWeights = RewardWeights(),
) -> RewardBreakdown:
    """Full reward ``r_hit + alpha * r_iou + beta * r_box`` behind a format gate."""
    if parsed is None:
        return FORMAT_FAILURE
    r_hit = reward_hit(parsed, gt)
    r_iou = reward_iou(parsed, gt)
    r_box = reward_box(parsed, gt, dims)
    total = r_hit + weights.alpha * r_iou + weights.beta * r_box
    return RewardBreakdown(r_hit, r_iou, r_box, True, total)


def reward_for_mode(
    parsed: Box | None,
    gt: Box,
    dims: ImageDims,
    weights: RewardWeights,
    mode: RewardMode,
) -> RewardBreakdown:
    """Score a prediction using only the components ``mode`` needs."""
    mode = RewardMode(mode)
    if mode is RewardMode.COMBINED:
        return reward_combined(parsed, gt, dims, weights)
    if parsed is None:
        return FORMAT_FAILURE
    if mode is RewardMode.HIT_ONLY:
        r_hit = reward_hit(parsed, gt)
        return RewardBreakdown(r_hit, None, None, True, r_hit)
    if mode is RewardMode.IOU_ONLY:
        r_iou = reward_iou(parsed, gt)
        return RewardBreakdown(None, r_iou, None, True, r_iou)
    r_hit = reward_hit(parsed, gt)
    r_iou = reward_iou(parsed, gt)
    return RewardBreakdown(r_hit, r_iou, None, True, r_hit + weights.alpha * r_iou)
