"""GRPO training loop over the synthetic grounding environment.

Every iteration draws a batch (round-robin over a per-epoch shuffle of the
dataset), rolls out ``rollouts_n`` responses per query, scores them with the
configured reward mode, runs ``inner_epochs`` optimiser steps on the summed
per-query surrogate, and logs a :class:`MetricsRecord`.

Each query's rollouts come from its own counter-based RNG stream, and
gradients are accumulated in sorted query-id order, so runs are bit-identical
for a given seed regardless of how many worker threads are used.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import geometry
from ._io import atomic_write
from .evaluation import ScoredRow, summarize
from .grpo import LengthNorm, ObjectiveConfig, difficulty_weights, objective_gradient, padded_objective
from .policy_env import (
    GroundingSample,
    PolicyParams,
    RolloutGroup,
    init_params,
    rollout_group,
    sample_rng,
    with_difficulty_weights,
)
from .rewards import RewardMode, RewardWeights

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# RNG counter reserved for filter probes; training iterations never reach it.
PROBE_STREAM = 2**32 - 1


class ConfigError(ValueError):
    pass


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 300
    batch_size: int = 32
    rollouts_n: int = 8
    max_tokens: int = 64
    weights: RewardWeights = RewardWeights()
    objective: ObjectiveConfig = ObjectiveConfig()
    reward_mode: RewardMode = RewardMode.COMBINED
    optimizer: OptimizerKind = OptimizerKind.ADAM
    # Scaled for the tabular policy; the 3B-parameter reference run used 1e-6.
    learning_rate: float = 1e-2
    inner_epochs: int = 1
    filter_extremes: bool = False
    filter_probes: int = 8
    filter_predicate: str = "hit"
    difficulty_window: str = "dataset"
    # starting policy
    grid_bins: int = 16
    init_think_logit: float = -30.0
    prior_sigma: float | None = None
    think_dilution: float = 0.0
    # 0 defers to the GROUND_RL_THREADS environment variable.
    workers: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))

    def validate(self, dataset_size: int | None = None) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.max_tokens < 5:
            raise ConfigError(f"max_tokens must be >= 5, got {self.max_tokens}")
        if self.objective.max_tokens < self.max_tokens:
            raise ConfigError(
                f"objective.max_tokens={self.objective.max_tokens} is below max_tokens={self.max_tokens}"
            )
        if self.rollouts_n < 2:
            raise ConfigError(f"rollouts_n must be >= 2, got {self.rollouts_n}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if dataset_size is not None and self.batch_size > dataset_size:
            raise ConfigError(f"batch_size={self.batch_size} exceeds dataset size {dataset_size}")
        if self.inner_epochs < 1:
            raise ConfigError(f"inner_epochs must be >= 1, got {self.inner_epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.filter_predicate not in FILTER_PREDICATES:
            raise ConfigError(f"filter_predicate must be one of {sorted(FILTER_PREDICATES)}")
        if self.difficulty_window not in ("dataset", "batch"):
            raise ConfigError(f"difficulty_window must be 'dataset' or 'batch', got {self.difficulty_window!r}")
        if self.filter_probes < 2:
            raise ConfigError(f"filter_probes must be >= 2, got {self.filter_probes}")


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    mean_accuracy: float
    mean_iou: float
    mean_pred_lambda: float
    mean_gt_lambda: float
    mean_len_correct: float
    mean_len_incorrect: float
    extreme_all_correct_ratio: float
    extreme_all_incorrect_ratio: float
    extreme_all_correct_easy: float
    extreme_all_incorrect_easy: float
    extreme_all_correct_hard: float
    extreme_all_incorrect_hard: float
    degenerate_group_ratio: float
    objective_value: float
    mean_reward: float
    format_failure_rate: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, grad: PolicyParams) -> None:
        _check_finite(grad)
        params.buffer += self.lr * grad.buffer

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}


class Adam:
    """Adam in the ascent direction with bias-corrected moments."""

    def __init__(self, lr: float, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, params: PolicyParams, grad: PolicyParams) -> None:
        _check_finite(grad)
        g = grad.buffer
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params.buffer += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "t": self.t, "m": self.m.tolist(), "v": self.v.tolist(),
        }


def _check_finite(grad: PolicyParams) -> None:
    bad = ~np.isfinite(grad.buffer)
    if bad.any():
        m = len(grad.ids)
        where = np.flatnonzero(bad)
        ids = sorted({grad.ids[i] if i < m else grad.ids[(i - m) // (4 * grad.grid_bins)] for i in where})
        raise FloatingPointError(f"non-finite gradient in {bad.sum()} entries (samples {ids[:5]})")


def make_optimizer(cfg: TrainConfig, params: PolicyParams) -> SGD | Adam:
    if cfg.optimizer is OptimizerKind.SGD:
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, params.buffer.size)


def optimizer_from_state(state: dict) -> SGD | Adam:
    if state["kind"] == "sgd":
        return SGD(state["lr"])
    opt = Adam(state["lr"], len(state["m"]), state["beta1"], state["beta2"], state["eps"])
    opt.t = state["t"]
    opt.m = np.array(state["m"], dtype=np.float64)
    opt.v = np.array(state["v"], dtype=np.float64)
    return opt


# ---------------------------------------------------------------------------
# data filtering


def _hit(group_resp_parsed: geometry.Box | None, sample: GroundingSample) -> bool:
    if group_resp_parsed is None:
        return False
    return geometry.contains_point(sample.gt, *geometry.center(group_resp_parsed))


def _iou50(parsed: geometry.Box | None, sample: GroundingSample) -> bool:
    return parsed is not None and geometry.iou(parsed, sample.gt) >= 0.5


FILTER_PREDICATES: dict[str, Callable[[geometry.Box | None, GroundingSample], bool]] = {
    "hit": _hit,
    "iou50": _iou50,
}


@dataclass
class FilterResult:
    kept: list[GroundingSample]
    all_correct: list[str]
    all_incorrect: list[str]

    @property
    def discard_rate(self) -> float:
        total = len(self.kept) + len(self.all_correct) + len(self.all_incorrect)
        return (len(self.all_correct) + len(self.all_incorrect)) / total if total else 0.0


def filter_dataset(
    params: PolicyParams,
    dataset: Sequence[GroundingSample],
    k_probes: int = 8,
    seed: int = 0,
    max_tokens: int = 64,
    predicate: str = "hit",
) -> FilterResult:
    """Drop queries whose ``k_probes`` probe answers are all correct or all wrong."""
    if k_probes < 2:
        raise ValueError(f"k_probes must be >= 2, got {k_probes}")
    correct = FILTER_PREDICATES[predicate]
    kept, all_c, all_i = [], [], []
    for s in dataset:
        group = rollout_group(params, s, k_probes, max_tokens, RewardWeights(), sample_rng(seed, s.id, PROBE_STREAM))
        hits = [correct(r.parsed, s) for r in group.responses]
        if all(hits):
            all_c.append(s.id)
        elif not any(hits):
            all_i.append(s.id)
        else:
            kept.append(s)
    return FilterResult(kept, all_c, all_i)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    params: PolicyParams
    optimizer: SGD | Adam
    dataset: list[GroundingSample]
    filter: FilterResult | None = None
    rollouts: list[list[RolloutGroup]] = field(default_factory=list)


def batch_indices(iteration: int, batch_size: int, dataset_size: int, seed: int) -> list[int]:
    """Round-robin batch over a fresh seeded shuffle of the dataset each epoch."""
    out = []
    for g in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(g, dataset_size)
        perm = np.random.default_rng([seed, epoch]).permutation(dataset_size)
        out.append(int(perm[pos]))
    return out


def metric_rows(groups: Sequence[RolloutGroup]) -> list[ScoredRow]:
    """Per-response rows for metrics, computed from geometry only.

    Values are identical to what the reward functions would return, but no
    reward function is called, so the reward mode stays the only reader.
    """
    rows = []
    for g in groups:
        s = g.sample
        for r in g.responses:
            if r.parsed is None:
                rows.append(ScoredRow(s.id, 0.0, 0.0, 0.0, 0.0, None, s.rel_size, False, r.length))
                continue
            hit = 1.0 if geometry.contains_point(s.gt, *geometry.center(r.parsed)) else 0.0
            rows.append(ScoredRow(
                s.id, hit, geometry.iou(r.parsed, s.gt), None, None,
                geometry.relative_box_size(r.parsed, s.dims), s.rel_size, True, r.length,
            ))
    return rows


def _extreme_split(groups: Sequence[RolloutGroup], hard: Callable[[GroundingSample], bool]) -> dict[str, float]:
    out = {}
    for name, want_hard in (("easy", False), ("hard", True)):
        sel = [g for g in groups if hard(g.sample) == want_hard]
        hits = [[_hit(r.parsed, g.sample) for r in g.responses] for g in sel]
        out[f"extreme_all_correct_{name}"] = sum(all(h) for h in hits) / len(sel) if sel else float("nan")
        out[f"extreme_all_incorrect_{name}"] = sum(not any(h) for h in hits) / len(sel) if sel else float("nan")
    return out


def compute_metrics(
    iteration: int,
    groups: Sequence[RolloutGroup],
    hard: Callable[[GroundingSample], bool],
    objective_value: float,
) -> MetricsRecord:
    agg = summarize(metric_rows(groups), groups=True)
    totals = [t for g in groups for t in g.totals]
    return MetricsRecord(
        iteration=iteration,
        mean_accuracy=agg["accuracy"],
        mean_iou=agg["mean_iou"],
        mean_pred_lambda=agg["mean_lambda_pred"],
        mean_gt_lambda=agg["mean_lambda_gt"],
        mean_len_correct=agg["mean_len_correct"],
        mean_len_incorrect=agg["mean_len_incorrect"],
        extreme_all_correct_ratio=agg["extreme_all_correct_ratio"],
        extreme_all_incorrect_ratio=agg["extreme_all_incorrect_ratio"],
        degenerate_group_ratio=sum(g.advantages.degenerate for g in groups) / len(groups),
        objective_value=objective_value,
        mean_reward=math.fsum(totals) / len(totals),
        format_failure_rate=agg["format_failure_rate"],
        **_extreme_split(groups, hard),
    )


def _group_objective(params: PolicyParams, group: RolloutGroup, cfg: ObjectiveConfig, w: float) -> float:
    from .policy_env import padded_token_logprobs

    old, mask = group.padded_old_logprobs()
    new = padded_token_logprobs(params, group)
    return padded_objective(old, new, mask, group.advantages.advantages, cfg, w, group.padded_ref_logprobs())


def default_workers() -> int:
    raw = os.environ.get("GROUND_RL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GROUND_RL_THREADS must be an integer, got {raw!r}") from None
    if n == 0:
        return os.cpu_count() or 1
    return max(n, 1)


def train(
    dataset: Sequence[GroundingSample],
    cfg: TrainConfig,
    params: PolicyParams | None = None,
    *,
    keep_rollouts: bool = False,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> TrainResult:
    """Run GRPO for ``cfg.iterations`` iterations.

    ``params`` defaults to :func:`init_params` built from ``cfg``; it is updated
    in place and returned. ``keep_rollouts`` retains every iteration's groups.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    cfg.validate()
    if params is None:
        params = init_params(
            dataset, cfg.grid_bins, think_logit=cfg.init_think_logit,
            prior_sigma=cfg.prior_sigma, think_dilution=cfg.think_dilution,
        )
    filt = None
    data = list(dataset)
    if cfg.filter_extremes:
        filt = filter_dataset(params, data, cfg.filter_probes, cfg.seed, cfg.max_tokens, cfg.filter_predicate)
        data = filt.kept
        log.info("filter kept %d of %d samples", len(data), len(dataset))
        if not data:
            raise ConfigError("data filter discarded every sample")
    cfg.validate(len(data))
    data = with_difficulty_weights(data)
    median_lambda = float(np.median([s.rel_size for s in data]))

    def hard(s: GroundingSample) -> bool:
        return s.rel_size < median_lambda

    ref_params = params.copy() if cfg.objective.kl_coefficient > 0 else None
    optimizer = make_optimizer(cfg, params)
    workers = cfg.workers or default_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    result = TrainResult([], params, optimizer, data, filt)
    try:
        for it in range(cfg.iterations):
            batch = [data[i] for i in batch_indices(it, cfg.batch_size, len(data), cfg.seed)]

            def roll(s: GroundingSample) -> RolloutGroup:
                return rollout_group(
                    params, s, cfg.rollouts_n, cfg.max_tokens, cfg.weights,
                    sample_rng(cfg.seed, s.id, it), cfg.reward_mode, ref_params,
                )

            groups = list(pool.map(roll, batch)) if pool else [roll(s) for s in batch]
            if cfg.difficulty_window == "batch":
                bw = difficulty_weights([s.rel_size for s in batch])
                w = {id(g): float(x) for g, x in zip(groups, bw)}
            else:
                w = {id(g): g.sample.w_q for g in groups}
            ordered = sorted(groups, key=lambda g: g.sample.id)
            objective_value = math.fsum(_group_objective(params, g, cfg.objective, w[id(g)]) for g in ordered)
            for _ in range(cfg.inner_epochs):
                grad = params.zeros_like()
                for g in ordered:
                    grad.buffer += objective_gradient(params, g, cfg.objective, w[id(g)]).buffer
                optimizer.step(params, grad)
            record = compute_metrics(it, groups, hard, objective_value)
            result.records.append(record)
            if keep_rollouts:
                result.rollouts.append(groups)
            if on_record is not None:
                on_record(record)
    finally:
        if pool:
            pool.shutdown()
    return result


# ---------------------------------------------------------------------------
# files


def _fmt(v: object) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _json_float(v: float) -> float | None:
    return None if isinstance(v, float) and math.isnan(v) else v


def metrics_jsonl(records: Sequence[MetricsRecord]) -> str:
    return "".join(
        json.dumps({k: _json_float(v) for k, v in dataclasses.asdict(r).items()}) + "\n" for r in records
    )


def write_metrics(records: Sequence[MetricsRecord], csv_path: str | Path, jsonl_path: str | Path | None = None) -> None:
    atomic_write(csv_path, metrics_csv(records))
    if jsonl_path is not None:
        atomic_write(jsonl_path, metrics_jsonl(records))


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def save_checkpoint(path: str | Path, params: PolicyParams, optimizer: SGD | Adam | None = None) -> None:
    """JSON checkpoint. Floats are written with ``repr`` so they round-trip exactly.

    Schema (version 1): ``version``, ``ids``, ``grid_bins``, ``think_dilution``,
    ``think_logit`` (list, one per id), ``coord_logits`` (ids x 4 x grid_bins)
    and ``optimizer`` (``null`` or the optimiser's state dict).
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "ids": list(params.ids),
        "grid_bins": params.grid_bins,
        "think_dilution": params.think_dilution,
        "think_logit": params.think_logit.tolist(),
        "coord_logits": params.coord_logits.tolist(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    atomic_write(path, json.dumps(payload) + "\n")


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, SGD | Adam | None]:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    params = PolicyParams(
        payload["ids"], payload["grid_bins"],
        np.array(payload["think_logit"], dtype=np.float64),
        np.array(payload["coord_logits"], dtype=np.float64),
        payload["think_dilution"],
    )
    opt = payload["optimizer"]
    return params, (optimizer_from_state(opt) if opt is not None else None)


# ---------------------------------------------------------------------------
# flat key = value configuration

_WEIGHT_KEYS = {"alpha", "beta"}
_OBJECTIVE_KEYS = {
    "clip_epsilon", "length_norm", "difficulty_weighting", "kl_coefficient",
    "norm_max_tokens",
}


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _coerce(name: str, raw: str, current: object) -> object:
    if raw.strip().lower() in ("none", "") and name == "prior_sigma":
        return None
    if isinstance(current, bool):
        return _parse_bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or name == "prior_sigma":
        return float(raw)
    return raw.strip()


def config_keys() -> list[str]:
    top = [f.name for f in fields(TrainConfig) if f.name not in ("weights", "objective")]
    return sorted(top + list(_WEIGHT_KEYS) + list(_OBJECTIVE_KEYS))


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    return dict(parser["config"])


def apply_overrides(cfg: TrainConfig, values: dict[str, object]) -> TrainConfig:
    """Return ``cfg`` with flat keys replaced; string values are coerced."""
    top: dict[str, object] = {}
    weights: dict[str, object] = {}
    objective: dict[str, object] = {}
    for key, raw in values.items():
        if key in _WEIGHT_KEYS:
            weights[key] = float(raw) if isinstance(raw, str) else raw
        elif key in _OBJECTIVE_KEYS:
            name = "max_tokens" if key == "norm_max_tokens" else key
            cur = getattr(cfg.objective, name)
            if isinstance(cur, Enum):
                cur = cur.value
            objective[name] = _coerce(name, raw, cur) if isinstance(raw, str) else raw
        elif key in {f.name for f in fields(TrainConfig)} - {"weights", "objective"}:
            cur = getattr(cfg, key)
            if isinstance(cur, Enum):
                cur = cur.value
            top[key] = _coerce(key, raw, cur) if isinstance(raw, str) else raw
        else:
            raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(config_keys())}")
    try:
        new = dataclasses.replace(cfg, **top)
        if weights:
            new = dataclasses.replace(new, weights=dataclasses.replace(new.weights, **weights))
        obj = dataclasses.replace(new.objective, **objective) if objective else new.objective
        # Keep the MaxTokens constant at least as large as the generation budget.
        if "max_tokens" in top and "max_tokens" not in objective and obj.max_tokens < new.max_tokens:
            obj = dataclasses.replace(obj, max_tokens=new.max_tokens)
        return dataclasses.replace(new, objective=obj)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as f:
        values = parse_config_text(f.read())
    return apply_overrides(base or TrainConfig(), values)


PRESETS: dict[str, dict[str, object]] = {
    "hit-only": {"reward_mode": RewardMode.HIT_ONLY},
    "iou-only": {"reward_mode": RewardMode.IOU_ONLY},
    "hit+iou": {"reward_mode": RewardMode.HIT_PLUS_IOU},
    "combined": {"reward_mode": RewardMode.COMBINED},
    "std-grpo": {"reward_mode": RewardMode.COMBINED, "length_norm": LengthNorm.PER_RESPONSE,
                 "difficulty_weighting": False},
    "max-tokens-norm": {"reward_mode": RewardMode.COMBINED, "length_norm": LengthNorm.MAX_TOKENS,
                        "difficulty_weighting": False},
    "difficulty-weighted": {"reward_mode": RewardMode.COMBINED, "length_norm": LengthNorm.MAX_TOKENS,
                            "difficulty_weighting": True},
}
