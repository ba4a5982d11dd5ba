"""Shared builders for randomised (params, group, config) cases."""

from __future__ import annotations

import numpy as np

from ground_rl.geometry import ImageDims
from ground_rl.grpo import LengthNorm, ObjectiveConfig, finite_diff_gradient, objective_gradient
from ground_rl.policy_env import generate_dataset, init_params, rollout_group, sample_rng
from ground_rl.rewards import RewardWeights


def gradient_case(seed: int, *, length_norm=None, weighting=None, shift=None, kl=0.0, second_epoch=False):
    """A rollout group from a random policy and a perturbed "new" policy.

    ``shift`` is the scale of a random logit perturbation between the sampling
    policy and the evaluated one. ``second_epoch`` instead evaluates after one
    real ascent step large enough to push ratios past the clip range, i.e. the
    second of two inner epochs.
    """
    rng = np.random.default_rng(seed)
    G = int(rng.integers(3, 7))
    data = generate_dataset(4, ImageDims(90, 60), G, (0.2, 0.8), seed)
    old = init_params(data, G, think_logit=float(rng.normal(0, 1)), think_dilution=float(rng.uniform(0, 0.2)))
    old.coord_logits[:] = rng.normal(0, 1, old.coord_logits.shape)
    ref = None
    if kl > 0:
        ref = old.copy()
        ref.buffer += rng.normal(0, 0.3, ref.buffer.shape)
    sample = data[int(rng.integers(len(data)))]
    for attempt in range(100):
        group = rollout_group(old, sample, 6, 12, RewardWeights(), sample_rng(seed, sample.id, attempt), ref_params=ref)
        if not group.advantages.degenerate:
            break
    cfg = ObjectiveConfig(
        clip_epsilon=0.2,
        length_norm=length_norm or [LengthNorm.PER_RESPONSE, LengthNorm.MAX_TOKENS][int(rng.integers(2))],
        max_tokens=12,
        difficulty_weighting=bool(rng.integers(2)) if weighting is None else weighting,
        kl_coefficient=kl,
    )
    new = old.copy()
    if second_epoch:
        g = objective_gradient(old, group, cfg, sample.w_q).buffer
        new.buffer += g / np.abs(g).max()
    else:
        if shift is None:
            shift = float(rng.choice([0.0, 0.1, 0.6]))
        new.buffer += rng.normal(0, shift, new.buffer.shape)
    return new, group, cfg, sample.w_q


def clipped_fraction(params, group, cfg) -> float:
    """Share of tokens whose ratio lies outside the clip range."""
    from ground_rl.policy_env import padded_token_logprobs

    old, mask = group.padded_old_logprobs()
    ratio = np.exp(padded_token_logprobs(params, group) - old)[mask]
    return float(np.mean(np.abs(ratio - 1) > cfg.clip_epsilon))


def relative_error(seed: int, step: float = 1e-5, **kw) -> float:
    params, group, cfg, w = gradient_case(seed, **kw)
    exact = objective_gradient(params, group, cfg, w).buffer
    approx = finite_diff_gradient(params, group, cfg, w, step=step).buffer
    return float(np.linalg.norm(exact - approx) / max(np.linalg.norm(exact), 1e-12))


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []
