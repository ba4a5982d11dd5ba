"""Acceptance suite: the eight headline checks of the package.

Each ``criterion_N`` function returns ``(passed, detail)``; the pytest wrappers
assert on it and a terminal-summary hook prints one PASS/FAIL line per
criterion. Run directly (``python3 tests/test_acceptance.py``) to get the same
lines without pytest.

Criteria 4-6 are directional training-dynamics checks over seeds 0..4 on a
64-sample set (lambda in [0.05, 0.6], G=16, N=8, 300 iterations). "Initial"
and "final" values average the first and last epoch (iterations 0-1 and
298-299: two batches of 32 cover all 64 samples).
"""

from __future__ import annotations

import math
import statistics
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _cases import ACCEPTANCE_LINES, clipped_fraction, gradient_case, relative_error  # noqa: E402
from ground_rl.evaluation import predictions_from_groups, score_predictions  # noqa: E402
from ground_rl.geometry import Box, ImageDims  # noqa: E402
from ground_rl.grpo import LengthNorm, difficulty_weights, group_advantages  # noqa: E402
from ground_rl.policy_env import (  # noqa: E402
    GroundingSample,
    enumerate_responses,
    generate_dataset,
    init_params,
    rollout_group,
    sample_rng,
    write_dataset,
)
from ground_rl.rewards import RewardWeights, reward_box, reward_combined  # noqa: E402
from ground_rl.trainer import (  # noqa: E402
    PRESETS,
    TrainConfig,
    apply_overrides,
    filter_dataset,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics,
)

SEEDS = range(5)
DIMS = ImageDims(150, 150)

# Shared starting point for the dynamics runs: a base policy whose coordinate
# logits are a Gaussian bump (sigma 2.5 bins) around the target, trained with
# Adam at lr 0.03.
DYNAMICS = {"prior_sigma": 2.5, "learning_rate": 0.03}
# Same setup with thinking switched on at the start; think tokens stay
# content-free (no dilution of the answer).
LENGTH_BIAS = {**DYNAMICS, "init_think_logit": 0.0}
# Adam rescales each query's (private) parameters by its own gradient scale,
# which cancels a constant per-query weight exactly; plain SGD keeps it.
DIFFICULTY = {**DYNAMICS, "optimizer": "sgd", "learning_rate": 3.0}


def _run(preset: str, seed: int, extra: dict):
    data = generate_dataset(64, DIMS, 16, (0.05, 0.6), seed)
    cfg = apply_overrides(TrainConfig(seed=seed, iterations=300, batch_size=32, rollouts_n=8, grid_bins=16),
                          {**PRESETS[preset], **extra})
    return train(data, cfg).records


def _epoch(records, field: str, last: bool) -> float:
    chunk = records[-2:] if last else records[:2]
    return float(np.nanmean([getattr(r, field) for r in chunk]))


def _median(values) -> float:
    return float(statistics.median(values))


# ---------------------------------------------------------------------------


def criterion_1():
    box = reward_box(Box(30, 30, 70, 70), Box(20, 20, 60, 60), ImageDims(100, 100))
    w = difficulty_weights([0.1, 0.2, 0.5])
    adv = group_advantages([1, 0, 0, 1]).advantages
    ok = (abs(box - 0.9) <= 1e-12
          and np.all(np.abs(w - [1.5, 0.875, 0.5]) <= 1e-12)
          and np.all(np.abs(adv - [1, -1, -1, 1]) <= 1e-12))
    return ok, f"R_Box={box!r} w={w.tolist()} A={adv.tolist()}"


def criterion_2():
    worst, clipped_cases = 0.0, 0
    for seed in range(100):
        kw = {
            "length_norm": (LengthNorm.PER_RESPONSE, LengthNorm.MAX_TOKENS)[seed % 2],
            "weighting": bool((seed // 2) % 2),
            "second_epoch": (seed // 4) % 2 == 1,
        }
        if kw["second_epoch"]:
            params, group, cfg, _ = gradient_case(seed, **kw)
            clipped_cases += clipped_fraction(params, group, cfg) > 0
        worst = max(worst, relative_error(seed, step=1e-5, **kw))
    ok = worst < 1e-4 and clipped_cases > 0
    return ok, f"max relative error {worst:.2e} over 100 cases; {clipped_cases} second-epoch cases with clipped tokens"


def criterion_3():
    sample = GroundingSample("q", ImageDims(100, 100), Box(0, 0, 60, 70))
    params = init_params([sample], 2, think_logit=0.0, think_dilution=0.2)
    params.coord_logits[0] = np.random.default_rng(0).normal(0, 1, (4, 2))
    outcomes = enumerate_responses(params, sample, 6)
    total_p = math.fsum(p for _, p in outcomes)
    exact = math.fsum(p * reward_combined(r.parsed, sample.gt, sample.dims).total for r, p in outcomes)
    n = 100_000
    g = rollout_group(params, sample, n, 6, RewardWeights(), sample_rng(0, sample.id, 0))
    mc, se = float(g.totals.mean()), float(g.totals.std(ddof=1) / math.sqrt(n))
    ok = abs(total_p - 1) <= 1e-9 and abs(mc - exact) < 3 * se
    return ok, (f"{len(outcomes)} outcomes, sum p - 1 = {total_p - 1:.1e}; E[R]={exact:.5f} "
                f"MC={mc:.5f} ({abs(mc - exact) / se:.2f} SE)")


def criterion_4():
    runs = {p: [_run(p, s, DYNAMICS) for s in SEEDS] for p in ("hit-only", "iou-only", "combined")}

    def med(p, field, last):
        return _median(_epoch(r, field, last) for r in runs[p])

    def gap(p):
        return _median(abs(_epoch(r, "mean_pred_lambda", True) - r[-1].mean_gt_lambda) for r in runs[p])

    hit_ini, hit_fin = med("hit-only", "mean_pred_lambda", False), med("hit-only", "mean_pred_lambda", True)
    hit_acc = med("hit-only", "mean_accuracy", True)
    iou_ini, iou_fin = med("iou-only", "mean_pred_lambda", False), med("iou-only", "mean_pred_lambda", True)
    gaps = {p: gap(p) for p in runs}
    a = hit_fin < hit_ini and hit_acc > 0.8
    b = iou_fin > iou_ini
    c = gaps["combined"] < gaps["hit-only"] and gaps["combined"] < gaps["iou-only"]
    detail = (f"(a) {'ok' if a else 'FAIL'}: hit-only lambda {hit_ini:.4f}->{hit_fin:.4f}, acc {hit_acc:.3f}; "
              f"(b) {'ok' if b else 'FAIL'}: iou-only lambda {iou_ini:.4f}->{iou_fin:.4f}; "
              f"(c) {'ok' if c else 'FAIL'}: |lambda-gt| combined {gaps['combined']:.4f} "
              f"hit {gaps['hit-only']:.4f} iou {gaps['iou-only']:.4f}")
    return a and b and c, detail


def criterion_5():
    lens = {p: _median(_epoch(_run(p, s, LENGTH_BIAS), "mean_len_incorrect", True) for s in SEEDS)
            for p in ("std-grpo", "max-tokens-norm")}
    ok = lens["std-grpo"] > lens["max-tokens-norm"]
    return ok, f"mean_len_incorrect per-response {lens['std-grpo']:.4f} vs max-tokens {lens['max-tokens-norm']:.4f}"


def criterion_6():
    hard = {p: _median(_epoch(_run(p, s, DIFFICULTY), "extreme_all_incorrect_hard", True) for s in SEEDS)
            for p in ("max-tokens-norm", "difficulty-weighted")}
    ok = hard["difficulty-weighted"] < hard["max-tokens-norm"]
    return ok, (f"hard-half all-incorrect ratio weighted {hard['difficulty-weighted']:.4f} "
                f"vs unweighted {hard['max-tokens-norm']:.4f}")


def criterion_7():
    n = 1000
    samples = [GroundingSample(f"s{i:04d}", ImageDims(100, 100), Box(0, 0, 100, 100)) for i in range(n)]
    params = init_params(samples, 2)
    res = filter_dataset(params, samples, k_probes=8, seed=0, max_tokens=64)
    p = (15 / 16) ** 8 + (1 / 16) ** 8
    se = math.sqrt(p * (1 - p) / n)
    ok = abs(res.discard_rate - p) < 3 * se
    return ok, f"discard rate {res.discard_rate:.4f} vs {p:.4f} ({abs(res.discard_rate - p) / se:.2f} SE)"


def criterion_8():
    data = generate_dataset(64, DIMS, 16, (0.05, 0.6), 0)
    cfg = TrainConfig(iterations=20, init_think_logit=0.0, think_dilution=0.1, prior_sigma=2.5)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        a, b = train(data, cfg, keep_rollouts=True), train(data, cfg)
        write_metrics(a.records, tmp / "a.csv")
        write_metrics(b.records, tmp / "b.csv")
        same_csv = (tmp / "a.csv").read_bytes() == (tmp / "b.csv").read_bytes()

        save_checkpoint(tmp / "c.json", a.params, a.optimizer)
        params, opt = load_checkpoint(tmp / "c.json")
        same_params = params.ids == a.params.ids and np.array_equal(params.buffer, a.params.buffer)
        same_opt = opt.state_dict() == a.optimizer.state_dict()

        write_dataset(tmp / "gt.jsonl", data)
        mismatches = 0
        fields = {"accuracy": "mean_accuracy", "mean_iou": "mean_iou", "mean_lambda_pred": "mean_pred_lambda",
                  "mean_lambda_gt": "mean_gt_lambda", "mean_len_correct": "mean_len_correct",
                  "mean_len_incorrect": "mean_len_incorrect", "mean_total": "mean_reward",
                  "format_failure_rate": "format_failure_rate",
                  "extreme_all_correct_ratio": "extreme_all_correct_ratio",
                  "extreme_all_incorrect_ratio": "extreme_all_incorrect_ratio"}
        for rec, groups in zip(a.records, a.rollouts):
            path = tmp / "pred.jsonl"
            path.write_text("".join(__import__("json").dumps(r) + "\n" for r in predictions_from_groups(groups)))
            agg = score_predictions(tmp / "gt.jsonl", path).aggregates
            mismatches += sum(agg[k] != getattr(rec, f) for k, f in fields.items())
    ok = same_csv and same_params and same_opt and mismatches == 0
    return ok, (f"csv identical={same_csv}, checkpoint params/optimizer equal={same_params}/{same_opt}, "
                f"eval-vs-log mismatches={mismatches}")


CRITERIA = {
    1: ("formula oracles", criterion_1),
    2: ("gradient vs finite differences", criterion_2),
    3: ("enumeration oracle", criterion_3),
    4: ("reward-hacking dynamics", criterion_4),
    5: ("length-bias fix", criterion_5),
    6: ("difficulty-weighting fix", criterion_6),
    7: ("filter calibration", criterion_7),
    8: ("determinism and round-trip", criterion_8),
}


def check(n: int) -> tuple[bool, str]:
    name, fn = CRITERIA[n]
    ok, detail = fn()
    ACCEPTANCE_LINES.append(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
    return ok, detail


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = check(n)
    assert ok, detail


if __name__ == "__main__":
    for n in sorted(CRITERIA):
        check(n)
        print(ACCEPTANCE_LINES[-1], flush=True)
