"""Offline scoring of grounding predictions against ground truth.

Ground truth uses the dataset JSON-lines schema (``id``, ``image_width``,
``image_height``, ``bbox`` and an optional ``tag``). Each prediction row carries
an ``id`` and exactly one of ``bbox``, ``point`` or ``format_failure: true``,
plus an optional ``response_length``. Repeated ids form rollout groups.

Aggregates are computed with :func:`math.fsum`, so they do not depend on row
order, and the trainer logs its metrics through :func:`summarize` as well.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ._io import atomic_write
from .geometry import Box, InvalidBoxError, OutOfBoundsError, contains_point, relative_box_size
from .policy_env import GroundingSample, RolloutGroup, sample_from_row, with_difficulty_weights
from .rewards import RewardWeights, reward_combined

REPORT_COLUMNS = (
    "id", "tag", "format_ok", "r_hit", "r_iou", "r_box", "total",
    "lambda_pred", "lambda_gt", "response_length",
)


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    pred: Box | None = None
    point: tuple[float, float] | None = None
    response_length: int | None = None
    lineno: int = 0

    @property
    def format_ok(self) -> bool:
        return self.pred is not None or self.point is not None


@dataclass(frozen=True)
class ScoredRow:
    id: str
    r_hit: float
    r_iou: float | None
    r_box: float | None
    total: float | None
    lambda_pred: float | None
    lambda_gt: float
    format_ok: bool
    response_length: int | None = None
    tag: str | None = None


@dataclass(frozen=True)
class GroupStats:
    extreme_all_correct_ratio: float
    extreme_all_incorrect_ratio: float
    mean_len_correct: float
    mean_len_incorrect: float


@dataclass
class EvalReport:
    rows: list[ScoredRow]
    aggregates: dict[str, float]
    by_tag: dict[str, dict[str, float]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


class GroupShapeError(ValueError):
    pass


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def group_stats(groups: Iterable[Sequence[tuple[bool, int | None]]]) -> GroupStats:
    """Extreme-group ratios and length statistics.

    Each group is a sequence of ``(correct, response_length)`` pairs. Every
    group must have the same size ``N >= 2``; lengths may be ``None`` in which
    case the length statistics come out NaN.
    """
    groups = [list(g) for g in groups]
    if not groups:
        raise GroupShapeError("no groups given")
    sizes = {len(g) for g in groups}
    if len(sizes) != 1:
        raise GroupShapeError(f"ragged group sizes: {sorted(sizes)}")
    if sizes.pop() < 2:
        raise GroupShapeError("groups need at least 2 predictions")
    all_correct = sum(all(c for c, _ in g) for g in groups)
    all_incorrect = sum(not any(c for c, _ in g) for g in groups)
    len_c = [float(n) for g in groups for c, n in g if c and n is not None]
    len_i = [float(n) for g in groups for c, n in g if not c and n is not None]
    return GroupStats(
        all_correct / len(groups),
        all_incorrect / len(groups),
        _mean(len_c),
        _mean(len_i),
    )


def summarize(rows: Sequence[ScoredRow], *, groups: bool | None = None) -> dict[str, float]:
    """Aggregate scored rows.

    Format failures count as misses and as IoU 0; point predictions count for
    accuracy only. Group statistics are added when ids repeat (or when
    ``groups`` is true) and every id has the same number of rows.
    """
    box_like = [r for r in rows if r.r_iou is not None or not r.format_ok]
    totals = [r.total for r in rows if r.total is not None]
    per_id: dict[str, list[ScoredRow]] = defaultdict(list)
    for r in rows:
        per_id[r.id].append(r)
    out = {
        "n_rows": float(len(rows)),
        "accuracy": _mean([r.r_hit for r in rows]),
        "mean_iou": _mean([r.r_iou if r.r_iou is not None else 0.0 for r in box_like]),
        "mean_total": _mean(totals),
        "mean_lambda_pred": _mean([r.lambda_pred for r in rows if r.lambda_pred is not None]),
        "mean_lambda_gt": _mean([g[0].lambda_gt for g in per_id.values()]),
        "format_failure_rate": _mean([0.0 if r.format_ok else 1.0 for r in rows]),
    }
    if groups is None:
        groups = len(per_id) < len(rows)
    if groups:
        stats = group_stats([[(r.r_hit == 1.0, r.response_length) for r in g] for g in per_id.values()])
        out.update(asdict(stats))
    return out


def score_record(record: PredictionRecord, sample: GroundingSample, weights: RewardWeights) -> ScoredRow:
    if record.point is not None:
        hit = 1.0 if contains_point(sample.gt, *record.point) else 0.0
        return ScoredRow(record.id, hit, None, None, None, None, sample.rel_size, True, record.response_length, sample.tag)
    rb = reward_combined(record.pred, sample.gt, sample.dims, weights)
    lam = None
    if record.pred is not None:
        try:
            lam = relative_box_size(record.pred, sample.dims)
        except OutOfBoundsError:
            lam = None
    return ScoredRow(
        record.id, rb.r_hit, rb.r_iou, rb.r_box, rb.total, lam, sample.rel_size,
        rb.format_ok, record.response_length, sample.tag,
    )


def _numbers(value: object, n: int, what: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise ValueError(f"{what} must be a list of {n} numbers, got {value!r}")
    return [float(v) for v in value]


def parse_prediction(row: Mapping, lineno: int = 0) -> PredictionRecord:
    """Parse one prediction object; raises ``ValueError`` on malformed rows.

    A degenerate or negative ``bbox`` is an unusable answer and becomes a
    format failure rather than an error.
    """
    if not isinstance(row, Mapping) or "id" not in row:
        raise ValueError("missing 'id'")
    kinds = [k for k in ("bbox", "point", "format_failure") if k in row]
    if len(kinds) != 1:
        raise ValueError(f"need exactly one of bbox/point/format_failure, got {kinds}")
    length = row.get("response_length")
    if length is not None and (not isinstance(length, int) or isinstance(length, bool) or length < 0):
        raise ValueError(f"response_length must be a non-negative int, got {length!r}")
    sid = str(row["id"])
    if kinds[0] == "format_failure":
        if row["format_failure"] is not True:
            raise ValueError("format_failure must be true when present")
        return PredictionRecord(sid, response_length=length, lineno=lineno)
    if kinds[0] == "point":
        x, y = _numbers(row["point"], 2, "point")
        return PredictionRecord(sid, point=(x, y), response_length=length, lineno=lineno)
    coords = _numbers(row["bbox"], 4, "bbox")
    try:
        box = Box(*coords)
    except InvalidBoxError:
        box = None
    return PredictionRecord(sid, pred=box, response_length=length, lineno=lineno)


def predictions_from_groups(groups: Iterable[RolloutGroup]) -> list[dict]:
    """Prediction rows (the JSON-lines schema above) for simulator rollouts."""
    rows = []
    for g in groups:
        for r in g.responses:
            row: dict = {"id": g.sample.id, "response_length": r.length}
            if r.parsed is None:
                row["format_failure"] = True
            else:
                row["bbox"] = list(r.parsed.as_tuple())
            rows.append(row)
    return rows


def _read_jsonl(path: Path, errors: list[str]) -> Iterable[tuple[int, dict]]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                errors.append(f"{path}:{lineno}: invalid JSON ({e.msg})")


def load_ground_truth(path: str | Path, errors: list[str]) -> dict[str, GroundingSample]:
    path = Path(path)
    samples: dict[str, GroundingSample] = {}
    for lineno, row in _read_jsonl(path, errors):
        try:
            s = sample_from_row(row)
        except (ValueError, KeyError, TypeError) as e:
            errors.append(f"{path}:{lineno}: malformed ground-truth row ({e})")
            continue
        if s.id in samples:
            errors.append(f"{path}:{lineno}: duplicate ground-truth id {s.id!r}")
            continue
        samples[s.id] = s
    weighted = with_difficulty_weights(list(samples.values()))
    return {s.id: s for s in weighted}


def load_predictions(path: str | Path, errors: list[str]) -> list[PredictionRecord]:
    path = Path(path)
    out = []
    for lineno, row in _read_jsonl(path, errors):
        try:
            out.append(parse_prediction(row, lineno))
        except (ValueError, TypeError) as e:
            errors.append(f"{path}:{lineno}: malformed prediction ({e})")
    return out


def score_predictions(
    gt_file: str | Path,
    pred_file: str | Path,
    weights: RewardWeights = RewardWeights(),
    *,
    expect_groups: bool | None = None,
) -> EvalReport:
    """Score a prediction file against a ground-truth file.

    Bad rows are itemised in ``report.errors`` (with file and line number) and
    skipped; the remaining rows are still scored. ``expect_groups=False`` turns
    repeated ids into duplicate-id errors; ``None`` treats them as groups.
    """
    for p in (gt_file, pred_file):
        if not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")
    errors: list[str] = []
    warnings: list[str] = []
    truth = load_ground_truth(gt_file, errors)
    records = load_predictions(pred_file, errors)

    rows: list[ScoredRow] = []
    seen: dict[str, int] = defaultdict(int)
    for rec in records:
        sample = truth.get(rec.id)
        if sample is None:
            errors.append(f"{pred_file}:{rec.lineno}: unknown id {rec.id!r}")
            continue
        if expect_groups is False and seen[rec.id]:
            errors.append(f"{pred_file}:{rec.lineno}: duplicate id {rec.id!r}")
            continue
        seen[rec.id] += 1
        row = score_record(rec, sample, weights)
        if rec.pred is not None and row.lambda_pred is None:
            warnings.append(f"{pred_file}:{rec.lineno}: box of {rec.id!r} extends outside the image")
        rows.append(row)

    counts = set(seen.values())
    grouped = bool(expect_groups) or (expect_groups is None and any(c > 1 for c in counts))
    if grouped and len(counts) > 1:
        modal = max(counts, key=lambda c: sum(v == c for v in seen.values()))
        for sid, c in sorted(seen.items()):
            if c != modal:
                errors.append(f"{pred_file}: id {sid!r} has {c} predictions, expected {modal}")
        grouped = False
    if grouped and counts == {1}:
        errors.append(f"{pred_file}: group statistics need at least 2 predictions per id")
        grouped = False

    aggregates = summarize(rows, groups=grouped) if rows else {}
    by_tag: dict[str, dict[str, float]] = {}
    tags = sorted({r.tag for r in rows if r.tag is not None})
    for tag in tags:
        by_tag[tag] = summarize([r for r in rows if r.tag == tag], groups=grouped)
    return EvalReport(rows, aggregates, by_tag, errors, warnings)


def _cell(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _nan_to_none(d: Mapping[str, float]) -> dict[str, float | None]:
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in d.items()}


def write_report(report: EvalReport, csv_path: str | Path, json_path: str | Path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        d = asdict(r)
        lines.append(",".join(_cell(d[c]) for c in REPORT_COLUMNS))
    atomic_write(csv_path, "\n".join(lines) + "\n")
    payload = {
        "aggregates": _nan_to_none(report.aggregates),
        "by_tag": {k: _nan_to_none(v) for k, v in report.by_tag.items()},
        "errors": report.errors,
        "warnings": report.warnings,
    }
    atomic_write(json_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
