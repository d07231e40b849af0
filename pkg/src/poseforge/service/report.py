"""Cross-check aggregation: 2D pixel errors against the original projections
and 3D errors of re-triangulated corrected keypoints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cameras import Rig, project, triangulate
from ..skeleton import KeypointLayout, Pose3D
from .store import CorrectionRecord

HIST_EDGES_MM = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 75.0, 100.0]


@dataclass(frozen=True)
class ReviewPose:
    """One review unit: a pose-set with its world 3D and the 4 camera views."""

    pose_key: str
    subject: str
    world: Pose3D
    view_samples: dict[str, str]  # camera id -> sample id


def part_of(index0: int, layout: KeypointLayout) -> str:
    for part in ("body", "face", "left_hand", "right_hand"):
        if index0 in set(layout.part_indices(part)):
            return "hand" if part.endswith("hand") else part
    raise ValueError(index0)


def compute_crosscheck(records: list[CorrectionRecord],
                       review: dict[str, ReviewPose], rig: Rig,
                       layout: KeypointLayout) -> dict:
    """Pure function of the correction log and dataset.

    2D error: corrected position vs the original projection, per correction
    instance (multi-annotator corrections averaged per view first). 3D error:
    re-triangulation of per-view merged corrections vs the original 3D,
    for keypoints corrected in >=2 views with a non-opposing pair; others
    are counted in the coverage field.
    """
    # (pose, view, kp index0) -> list of corrected uv across annotators
    merged: dict[tuple[str, str, int], list[np.ndarray]] = {}
    for rec in records:
        if rec.sample_id not in review:
            continue
        for index, u, v in rec.corrections:
            merged.setdefault((rec.sample_id, rec.view, index - 1), []) \
                .append(np.array([u, v]))

    errors_2d: dict[str, list[float]] = {"body": [], "face": [], "hand": []}
    errors_3d: dict[str, list[float]] = {"body": [], "face": [], "hand": []}
    by_keypoint: dict[tuple[str, int], dict[str, np.ndarray]] = {}
    for (pose_key, view, k0), fixes in merged.items():
        pose = review[pose_key]
        cam = rig.camera(view)
        corrected = np.mean(fixes, axis=0)
        original = project(pose.world.coords[k0], cam)
        errors_2d[part_of(k0, layout)].append(
            float(np.linalg.norm(corrected - original)))
        by_keypoint.setdefault((pose_key, k0), {})[view] = corrected

    coverage = {"corrected_2d": len(merged), "keypoints_3d": 0,
                "single_view": 0, "opposing_only": 0}
    for (pose_key, k0), views in by_keypoint.items():
        if len(views) < 2:
            coverage["single_view"] += 1
            continue
        if not rig.has_non_opposing_pair(views):
            coverage["opposing_only"] += 1
            continue
        obs = [(rig.camera(cid), uv) for cid, uv in sorted(views.items())]
        point, _ = triangulate(obs, rig)
        original = review[pose_key].world.coords[k0]
        errors_3d[part_of(k0, layout)].append(
            float(np.linalg.norm(point - original)))
        coverage["keypoints_3d"] += 1

    def stats(per_part: dict[str, list[float]]) -> dict[str, tuple[float, int]]:
        out = {}
        for part in ("body", "face", "hand"):
            vals = per_part[part]
            out[part] = (float(np.mean(vals)) if vals else 0.0, len(vals))
        everything = [v for vals in per_part.values() for v in vals]
        out["all"] = (float(np.mean(everything)) if everything else 0.0,
                      len(everything))
        return out

    s2, s3 = stats(errors_2d), stats(errors_3d)
    all_3d = [v for vals in errors_3d.values() for v in vals]
    counts, edges = np.histogram(all_3d, bins=HIST_EDGES_MM)
    return {
        "parts": {
            part: {
                "mean_2d_px": s2[part][0], "count_2d": s2[part][1],
                "mean_3d_mm": s3[part][0], "count_3d": s3[part][1],
            } for part in ("all", "body", "face", "hand")
        },
        "histogram_3d_mm": {"edges": [float(e) for e in edges],
                            "counts": [float(c) for c in counts]},
        "corrected_keypoints": len(by_keypoint),
        "coverage": coverage,
    }
