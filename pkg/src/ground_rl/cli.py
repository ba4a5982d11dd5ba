"""Command-line entry point: ``ground-rl <command>``.

Commands: ``gen-data``, ``train``, ``score``, ``compare`` and ``filter-data``.
Global flags (``--config``, ``--seed``, ``--out``, ``--quiet``) may appear
before or after the command name. Training settings resolve in the order
defaults < ``--config`` file < ``--preset`` < explicit flags.

Exit status is 0 when no errors were itemised, 1 on runtime errors and 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from ._io import atomic_write
from .evaluation import score_predictions, write_report
from .geometry import ImageDims
from .grpo import LengthNorm
from .policy_env import GenerationError, generate_dataset, init_params, read_dataset, write_dataset
from .rewards import RewardMode, RewardWeights
from .trainer import (
    FILTER_PREDICATES,
    METRIC_COLUMNS,
    PRESETS,
    ConfigError,
    OptimizerKind,
    TrainConfig,
    apply_overrides,
    filter_dataset,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
    write_metrics,
)

log = logging.getLogger("ground_rl")

DEFAULT_OUT = "out"

# train flag dest -> flat config key
TRAIN_FLAGS = {
    "reward_mode": "reward_mode",
    "length_norm": "length_norm",
    "difficulty_weighting": "difficulty_weighting",
    "iterations": "iterations",
    "batch_size": "batch_size",
    "rollouts": "rollouts_n",
    "max_tokens": "max_tokens",
    "optimizer": "optimizer",
    "learning_rate": "learning_rate",
    "inner_epochs": "inner_epochs",
    "clip_epsilon": "clip_epsilon",
    "kl_coefficient": "kl_coefficient",
    "alpha": "alpha",
    "beta": "beta",
    "grid_bins": "grid_bins",
    "init_think_logit": "init_think_logit",
    "prior_sigma": "prior_sigma",
    "think_dilution": "think_dilution",
    "filter_extremes": "filter_extremes",
    "filter_probes": "filter_probes",
    "filter_predicate": "filter_predicate",
    "difficulty_window": "difficulty_window",
    "workers": "workers",
}


class CliError(Exception):
    pass


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Shared by the top-level parser and every sub-command; the sub-command copy
    # uses SUPPRESS so it does not clobber values given before the command name.
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", default=d, help="flat key = value training config file")
    g.add_argument("--seed", type=int, metavar="INT", default=d, help="random seed (default 0)")
    g.add_argument("--out", metavar="DIR", default=d,
                   help=f"output directory (default {DEFAULT_OUT}); gen-data also accepts a file path")
    g.add_argument("--quiet", action="store_true", default=d, help="only print warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ground-rl",
        description="GRPO grounding laboratory: generate data, train, score and compare runs.",
        parents=[_global_flags(False)],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = [_global_flags(True)]

    p = sub.add_parser("gen-data", parents=common, help="write a synthetic grounding dataset (JSON lines)")
    p.add_argument("--num", type=int, default=64, help="number of samples (default 64)")
    p.add_argument("--lambda-min", type=float, default=0.05, help="smallest relative box size (default 0.05)")
    p.add_argument("--lambda-max", type=float, default=0.6, help="largest relative box size (default 0.6)")
    p.add_argument("--image-width", type=float, default=150.0, help="image width in pixels (default 150)")
    p.add_argument("--image-height", type=float, default=150.0, help="image height in pixels (default 150)")
    p.add_argument("--grid-bins", type=int, default=16, help="coordinate grid size G (default 16)")

    p = sub.add_parser("train", parents=common, help="run a GRPO training experiment")
    p.add_argument("--data", metavar="PATH", help="dataset file; default generates 64 samples from --seed")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment preset")
    p.add_argument("--reward-mode", choices=[m.value for m in RewardMode])
    p.add_argument("--length-norm", choices=[m.value for m in LengthNorm])
    p.add_argument("--difficulty-weighting", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--rollouts", type=int, help="responses per query (N)")
    p.add_argument("--max-tokens", type=int, help="generation budget per response")
    p.add_argument("--optimizer", choices=[k.value for k in OptimizerKind])
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--inner-epochs", type=int, help="optimiser steps per batch (mu)")
    p.add_argument("--clip-epsilon", type=float)
    p.add_argument("--kl-coefficient", type=float)
    p.add_argument("--alpha", type=float, help="IoU reward weight")
    p.add_argument("--beta", type=float, help="box-size reward weight")
    p.add_argument("--grid-bins", type=int)
    p.add_argument("--init-think-logit", type=float)
    p.add_argument("--prior-sigma", type=float, help="Gaussian start around the target, in bins")
    p.add_argument("--think-dilution", type=float)
    p.add_argument("--filter-extremes", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--filter-probes", type=int)
    p.add_argument("--filter-predicate", choices=sorted(FILTER_PREDICATES))
    p.add_argument("--difficulty-window", choices=["dataset", "batch"])
    p.add_argument("--workers", type=int, help="rollout threads (0 = GROUND_RL_THREADS)")
    p.add_argument("--metrics", metavar="PATH", help="metrics CSV path (default OUT/metrics.csv)")
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint path (default OUT/checkpoint.json)")

    p = sub.add_parser("score", parents=common, help="score a prediction file against ground truth")
    p.add_argument("--gt", required=True, metavar="PATH", help="ground-truth JSON lines")
    p.add_argument("--pred", required=True, metavar="PATH", help="prediction JSON lines")
    p.add_argument("--groups", choices=["auto", "yes", "no"], default="auto",
                   help="treat repeated ids as rollout groups (default auto)")
    p.add_argument("--alpha", type=float, default=RewardWeights().alpha)
    p.add_argument("--beta", type=float, default=RewardWeights().beta)

    p = sub.add_parser("compare", parents=common, help="align two metric logs by iteration")
    p.add_argument("log_a", metavar="A", help="baseline metrics CSV")
    p.add_argument("log_b", metavar="B", help="metrics CSV compared against A (delta = B - A)")

    p = sub.add_parser("filter-data", parents=common, help="drop all-correct / all-incorrect queries")
    p.add_argument("--data", required=True, metavar="PATH", help="dataset file")
    p.add_argument("--checkpoint", metavar="PATH", help="policy checkpoint; default is the starting policy")
    p.add_argument("--probes", type=int, default=8, help="probe responses per query (default 8)")
    p.add_argument("--predicate", choices=sorted(FILTER_PREDICATES), default="hit")
    p.add_argument("--max-tokens", type=int, default=64)
    return parser


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(getattr(args, "out", None) or DEFAULT_OUT)


def _seed(args: argparse.Namespace) -> int:
    seed = getattr(args, "seed", None)
    return 0 if seed is None else seed


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        dims = ImageDims(args.image_width, args.image_height)
        samples = generate_dataset(args.num, dims, args.grid_bins, (args.lambda_min, args.lambda_max), _seed(args))
    except (ValueError, GenerationError) as e:
        raise CliError(str(e)) from e
    out = _out_dir(args)
    path = out if out.suffix else out / "dataset.jsonl"
    write_dataset(path, samples)
    log.info("wrote %d samples to %s", len(samples), path)
    return 0


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    preset = PRESETS[args.preset] if args.preset else {}
    explicit = {TRAIN_FLAGS[k]: v for k, v in vars(args).items() if k in TRAIN_FLAGS and v is not None}
    for key, value in explicit.items():
        if key in preset and _norm(preset[key]) != _norm(value):
            log.warning("--%s=%s overrides preset %r (%s=%s)", key.replace("_", "-"), _norm(value),
                        args.preset, key, _norm(preset[key]))
    return apply_overrides(apply_overrides(cfg, preset), explicit)


def _norm(v: object) -> object:
    return getattr(v, "value", v)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args)
    if args.data:
        dataset = read_dataset(args.data)
    else:
        dataset = generate_dataset(64, ImageDims(150.0, 150.0), cfg.grid_bins, (0.05, 0.6), cfg.seed)
    out = _out_dir(args)
    metrics_path = Path(args.metrics) if args.metrics else out / "metrics.csv"
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"

    def progress(rec) -> None:
        if rec.iteration % 50 == 0 or rec.iteration == cfg.iterations - 1:
            log.info("iter %d  acc %.3f  iou %.3f  lambda %.3f  reward %.3f", rec.iteration,
                     rec.mean_accuracy, rec.mean_iou, rec.mean_pred_lambda, rec.mean_reward)

    result = train(dataset, cfg, on_record=progress)
    if result.filter is not None:
        log.info("filter discarded %.1f%% of the data", 100 * result.filter.discard_rate)
    write_metrics(result.records, metrics_path, metrics_path.with_suffix(".jsonl"))
    save_checkpoint(ckpt_path, result.params, result.optimizer)
    log.info("wrote %s and %s", metrics_path, ckpt_path)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    expect = {"auto": None, "yes": True, "no": False}[args.groups]
    try:
        weights = RewardWeights(args.alpha, args.beta)
    except ValueError as e:
        raise CliError(str(e)) from e
    try:
        report = score_predictions(args.gt, args.pred, weights, expect_groups=expect)
    except FileNotFoundError as e:
        raise CliError(str(e)) from e
    out = _out_dir(args)
    write_report(report, out / "report.csv", out / "report.json")
    for w in report.warnings:
        log.warning("%s", w)
    for e in report.errors:
        log.error("%s", e)
    agg = report.aggregates
    if agg:
        log.info("accuracy %.4f  mean IoU %.4f  rows %d", agg["accuracy"], agg["mean_iou"], int(agg["n_rows"]))
    log.info("wrote %s and %s", out / "report.csv", out / "report.json")
    return 0 if report.ok else 1


def _read_log(path: str) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    if rows and "iteration" not in rows[0]:
        raise CliError(f"{path}: not a metrics log (no 'iteration' column)")
    return rows


def compare_logs(a: list[dict[str, str]], b: list[dict[str, str]]) -> str:
    """Side-by-side CSV of two metric logs with ``delta = b - a`` columns."""
    cols = [c for c in METRIC_COLUMNS if c != "iteration" and a and c in a[0] and b and c in b[0]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration"] + [f"{c}_{s}" for c in cols for s in ("a", "b", "delta")])
    for ra, rb in zip(a, b):
        if ra["iteration"] != rb["iteration"]:
            raise CliError(f"iteration mismatch: {ra['iteration']} vs {rb['iteration']}")
        row = [ra["iteration"]]
        for c in cols:
            x, y = float(ra[c]), float(rb[c])
            row += [ra[c], rb[c], repr(y - x) if not (math.isnan(x) or math.isnan(y)) else "nan"]
        w.writerow(row)
    return buf.getvalue()


def cmd_compare(args: argparse.Namespace) -> int:
    a, b = _read_log(args.log_a), _read_log(args.log_b)
    if len(a) != len(b):
        log.warning("logs differ in length (%d vs %d rows); truncating to %d", len(a), len(b), min(len(a), len(b)))
    path = _out_dir(args) / "compare.csv"
    atomic_write(path, compare_logs(a, b))
    log.info("wrote %s", path)
    return 0


def cmd_filter_data(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.data)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
        params = init_params(dataset, cfg.grid_bins, think_logit=cfg.init_think_logit,
                             prior_sigma=cfg.prior_sigma, think_dilution=cfg.think_dilution)
    try:
        res = filter_dataset(params, dataset, args.probes, _seed(args), args.max_tokens, args.predicate)
    except (KeyError, ValueError) as e:
        raise CliError(f"cannot filter: {e}") from e
    path = _out_dir(args) / "filtered.jsonl"
    write_dataset(path, res.kept)
    log.info("kept %d of %d (all-correct %d, all-incorrect %d, discard rate %.4f); wrote %s",
             len(res.kept), len(dataset), len(res.all_correct), len(res.all_incorrect), res.discard_rate, path)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "compare": cmd_compare,
    "filter-data": cmd_filter_data,
}


def _setup_logging(quiet: bool) -> None:
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    if not any(getattr(h, "_ground_rl", False) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        handler._ground_rl = True  # type: ignore[attr-defined]
        log.addHandler(handler)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.num < 1:
        parser.error(f"--num must be >= 1, got {args.num}")
    _setup_logging(bool(getattr(args, "quiet", None)))
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, FileNotFoundError, ValueError) as e:
        log.error("%s", e)
    return 1


if __name__ == "__main__":
    sys.exit(main())
