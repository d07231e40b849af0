"""Benchmark evaluation against sealed label files.

Prediction files are JSON lines of {"id", "kp3d": [133 x 3]}. Test 3D labels
are read only here, inside metric evaluation.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataio import read_dataset
from .metrics import MetricReport
from .skeleton import KeypointLayout, Pose3D

TASK_SPLITS = {"lift": ["test_lift"], "ilift": ["test_ilift"],
               "rgb": ["test_lift", "test_ilift"]}


def read_predictions(path: str | Path) -> dict[str, Pose3D]:
    preds = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                preds[rec["id"]] = Pose3D(np.asarray(rec["kp3d"], dtype=np.float64),
                                          frame="camera")
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed prediction: {exc}") from exc
    return preds


def write_predictions(preds: dict[str, Pose3D], path: str | Path) -> None:
    with open(path, "w") as fh:
        for sample_id in sorted(preds):
            fh.write(json.dumps({
                "id": sample_id,
                "kp3d": [[float(v) for v in row]
                         for row in preds[sample_id].coords],
            }, separators=(",", ":")) + "\n")


def evaluate_prediction_file(task: str, pred_file: str | Path,
                             label_dir: str | Path,
                             layout: KeypointLayout | None = None) -> dict:
    """Score predictions for one task against the sealed label files."""
    if task not in TASK_SPLITS:
        raise ValueError(f"unknown task {task!r}")
    layout = layout or KeypointLayout.default()
    labels = {}
    for split in TASK_SPLITS[task]:
        for s in read_dataset(label_dir, split)[split]:
            labels[s.sample_id] = s.pose3d
    preds = read_predictions(pred_file)
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise ValueError(f"predictions missing for {len(missing)} samples, "
                         f"first: {missing[:3]}")
    extra = sorted(set(preds) - set(labels))
    if extra:
        raise ValueError(f"predictions for unknown samples, first: {extra[:3]}")
    reports = [MetricReport.from_pair(preds[sid], labels[sid], layout)
               for sid in sorted(labels)]
    report = MetricReport.average(reports)
    return {"task": task, "samples": len(reports), "metrics": report.to_dict()}
