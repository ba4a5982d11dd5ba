"""Offline scoring of grounding predictions.

Writes a small ground-truth file and a prediction file (one format failure,
one miss, one hit) to a temp directory and prints the report.

    python3 demos/score_predictions.py
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from ground_rl.evaluation import score_predictions
from ground_rl.geometry import Box, ImageDims
from ground_rl.policy_env import GroundingSample, write_dataset

tmp = Path(tempfile.mkdtemp())
truth = [
    GroundingSample("button", ImageDims(1920, 1080), Box(100, 100, 300, 160)),
    GroundingSample("icon", ImageDims(1920, 1080), Box(1800, 20, 1840, 60)),
    GroundingSample("menu", ImageDims(1920, 1080), Box(0, 0, 400, 40)),
]
write_dataset(tmp / "gt.jsonl", truth)
preds = [
    {"id": "button", "bbox": [110, 105, 290, 150], "response_length": 12},
    {"id": "icon", "bbox": [1700, 20, 1740, 60], "response_length": 30},
    {"id": "menu", "format_failure": True, "response_length": 64},
]
(tmp / "pred.jsonl").write_text("".join(json.dumps(p) + "\n" for p in preds))

# %% score
report = score_predictions(tmp / "gt.jsonl", tmp / "pred.jsonl")
for row in report.rows:
    print(row)
for k, v in report.aggregates.items():
    print(f"{k:28s} {v}")
print("errors:", report.errors or "none")
