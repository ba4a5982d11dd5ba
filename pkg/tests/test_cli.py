from __future__ import annotations

import csv
import json
import logging

import pytest

from ground_rl.cli import build_parser, compare_logs, main, resolve_train_config
from ground_rl.policy_env import read_dataset
from ground_rl.rewards import RewardMode


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_deterministic(tmp_path):
    assert run("gen-data", "--num", 64, "--seed", 0, "--out", tmp_path / "a.jsonl") == 0
    assert run("--seed", 0, "gen-data", "--num", 64, "--out", tmp_path / "b.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    lams = [s.rel_size for s in read_dataset(tmp_path / "a.jsonl")]
    assert len(lams) == 64 and 0.05 <= min(lams) and max(lams) <= 0.6


def test_gen_data_directory_out(tmp_path):
    assert run("gen-data", "--num", 3, "--out", tmp_path / "d") == 0
    assert len(read_dataset(tmp_path / "d" / "dataset.jsonl")) == 3


def test_gen_data_num_zero_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("gen-data", "--num", 0, "--out", tmp_path / "x.jsonl")
    assert e.value.code == 2


def test_gen_data_infeasible_range(tmp_path, caplog):
    assert run("gen-data", "--num", 3, "--grid-bins", 2, "--lambda-min", 0.1, "--lambda-max", 0.2,
               "--out", tmp_path / "x.jsonl") == 1


def test_train_writes_metrics_and_checkpoint(tmp_path):
    assert run("train", "--preset", "hit-only", "--seed", 0, "--iterations", 3, "--quiet", "--out", tmp_path) == 0
    with open(tmp_path / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 and all(r["mean_pred_lambda"] for r in rows)
    assert (tmp_path / "metrics.jsonl").exists()
    ckpt = json.loads((tmp_path / "checkpoint.json").read_text())
    assert ckpt["version"] == 1 and len(ckpt["ids"]) == 64


def test_length_norm_presets_differ(tmp_path):
    common = ["--seed", 0, "--iterations", 6, "--init-think-logit", 0, "--think-dilution", 0.2, "--quiet"]
    assert run("train", "--preset", "std-grpo", *common, "--out", tmp_path / "a") == 0
    assert run("train", "--preset", "max-tokens-norm", *common, "--out", tmp_path / "b") == 0
    col = lambda p: [r["mean_len_incorrect"] for r in csv.DictReader(open(p / "metrics.csv"))]  # noqa: E731
    assert col(tmp_path / "a") != col(tmp_path / "b")


def test_preset_override_warns(caplog):
    args = build_parser().parse_args(["train", "--preset", "hit-only", "--reward-mode", "iou-only"])
    with caplog.at_level(logging.WARNING):
        cfg = resolve_train_config(args)
    assert cfg.reward_mode is RewardMode.IOU_ONLY
    assert any("overrides preset 'hit-only'" in r.message for r in caplog.records)


def test_config_file_then_preset_then_flags(tmp_path):
    (tmp_path / "c.cfg").write_text("iterations = 7\nreward_mode = iou-only\nlearning_rate = 0.5\n")
    args = build_parser().parse_args(["--config", str(tmp_path / "c.cfg"), "train", "--preset", "hit-only",
                                      "--learning-rate", "0.25"])
    cfg = resolve_train_config(args)
    assert (cfg.iterations, cfg.reward_mode, cfg.learning_rate) == (7, RewardMode.HIT_ONLY, 0.25)


def test_bad_config_key(tmp_path):
    (tmp_path / "c.cfg").write_text("nonsense = 1\n")
    assert run("--config", tmp_path / "c.cfg", "train", "--iterations", 1, "--out", tmp_path) == 1


def test_score(tmp_path):
    gt = tmp_path / "gt.jsonl"
    gt.write_text(json.dumps({"id": "a", "image_width": 10, "image_height": 10, "bbox": [0, 0, 5, 5]}) + "\n")
    pred = tmp_path / "p.jsonl"
    pred.write_text(json.dumps({"id": "a", "bbox": [0, 0, 5, 5]}) + "\n")
    assert run("score", "--gt", gt, "--pred", pred, "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["aggregates"]["accuracy"] == 1.0
    pred.write_text(json.dumps({"id": "zzz", "bbox": [0, 0, 5, 5]}) + "\n")
    assert run("score", "--gt", gt, "--pred", pred, "--out", tmp_path / "r") == 1


def test_score_missing_gt(tmp_path, caplog):
    pred = tmp_path / "p.jsonl"
    pred.write_text("")
    with caplog.at_level(logging.ERROR):
        assert run("score", "--gt", tmp_path / "missing.jsonl", "--pred", pred, "--out", tmp_path) == 1
    assert "missing.jsonl" in caplog.text


def test_compare(tmp_path, caplog):
    assert run("train", "--iterations", 4, "--quiet", "--out", tmp_path / "a") == 0
    assert run("train", "--iterations", 2, "--seed", 1, "--quiet", "--out", tmp_path / "b") == 0
    a, b = tmp_path / "a" / "metrics.csv", tmp_path / "b" / "metrics.csv"
    assert run("compare", a, a, "--out", tmp_path / "c") == 0
    rows = list(csv.DictReader(open(tmp_path / "c" / "compare.csv")))
    assert len(rows) == 4
    deltas = [v for r in rows for k, v in r.items() if k.endswith("_delta")]
    assert deltas and all(v in ("0.0", "nan") for v in deltas)
    with caplog.at_level(logging.WARNING):
        assert run("compare", a, b, "--out", tmp_path / "c") == 0
    assert "truncating to 2" in caplog.text
    assert len(list(csv.DictReader(open(tmp_path / "c" / "compare.csv")))) == 2


def test_compare_logs_delta_sign():
    a = [{"iteration": "0", "mean_pred_lambda": "0.3"}]
    b = [{"iteration": "0", "mean_pred_lambda": "0.5"}]
    out = list(csv.DictReader(compare_logs(a, b).splitlines()))
    assert float(out[0]["mean_pred_lambda_delta"]) == pytest.approx(0.2)


def test_filter_data(tmp_path):
    assert run("gen-data", "--num", 10, "--out", tmp_path / "d.jsonl") == 0
    assert run("filter-data", "--data", tmp_path / "d.jsonl", "--out", tmp_path) == 0
    kept = read_dataset(tmp_path / "filtered.jsonl")
    assert {s.id for s in kept} <= {s.id for s in read_dataset(tmp_path / "d.jsonl")}


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    for cmd in ("gen-data", "train", "score", "compare", "filter-data"):
        with pytest.raises(SystemExit):
            parser.parse_args([cmd, "--help"])
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--quiet"):
            assert flag in text
    with pytest.raises(SystemExit):
        parser.parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--preset", "--reward-mode", "--length-norm", "--difficulty-weighting", "--think-dilution"):
        assert flag in text
