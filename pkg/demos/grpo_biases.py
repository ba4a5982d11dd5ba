"""Length normalisation and difficulty weighting in the GRPO objective.

Compares per-response length normalisation against a constant max-tokens
divisor (thinking switched on at the start), then max-tokens with and without
difficulty weights (plain SGD, since Adam cancels a constant per-query weight).

    python3 demos/grpo_biases.py [iterations]
"""

from __future__ import annotations

import sys

import numpy as np

from ground_rl.geometry import ImageDims
from ground_rl.policy_env import generate_dataset
from ground_rl.trainer import PRESETS, TrainConfig, apply_overrides, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 150
data = generate_dataset(64, ImageDims(150, 150), 16, (0.05, 0.6), seed=0)
base = TrainConfig(seed=0, iterations=iterations, batch_size=32, rollouts_n=8, grid_bins=16, prior_sigma=2.5)


def last(records, field):
    return float(np.nanmean([getattr(r, field) for r in records[-2:]]))


# %% length normalisation
for preset in ("std-grpo", "max-tokens-norm"):
    cfg = apply_overrides(base, {**PRESETS[preset], "init_think_logit": 0.0, "learning_rate": 0.03})
    rec = train(data, cfg).records
    print(f"{preset:16s} length of incorrect answers {last(rec, 'mean_len_incorrect'):.2f}, "
          f"accuracy {last(rec, 'mean_accuracy'):.3f}")

# %% difficulty weighting
for preset in ("max-tokens-norm", "difficulty-weighted"):
    cfg = apply_overrides(base, {**PRESETS[preset], "optimizer": "sgd", "learning_rate": 3.0})
    rec = train(data, cfg).records
    print(f"{preset:20s} hard-half all-incorrect {last(rec, 'extreme_all_incorrect_hard'):.3f}, "
          f"easy-half all-incorrect {last(rec, 'extreme_all_incorrect_easy'):.3f}")

# %% what to look for
# Think tokens carry no information here, so any length drift comes from the
# objective alone. The weights rise steeply only for the very smallest boxes
# (min-max of 1/lambda), so most of the hard half is weighted below 1.
