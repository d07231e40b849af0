"""Detect -> triangulate -> complete -> refine orchestration, the four-corner
multi-crop quality score, and per-subject subset selection."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cameras import (
    PoseClass,
    Rig,
    classify_pose,
    in_image_bounds,
    project,
    triangulate_pose,
)
from .completion import CompletionNet, complete_pose
from .refinement import (
    CropEvidence,
    RefinerNet,
    corner_crops,
    fit_source_frame,
    refine,
    refine_pose_views,
    PART_MODEL,
)
from .skeleton import KeypointLayout, Pose2D, Pose3D


@dataclass(frozen=True)
class DetectionSet:
    """The 4-view 2D detections of one captured pose."""

    pose_id: str
    subject: str
    views: dict[str, Pose2D]


@dataclass(frozen=True)
class QualityScore:
    """Multi-crop consistency score: per-part per-view mean 2D deviation (px);
    the aggregate is the arithmetic mean of the per-view scores."""

    per_part_view: dict[str, dict[str, float]]
    skipped: tuple[tuple[str, str], ...] = ()

    def view_score(self, cam_id: str) -> float:
        vals = [views[cam_id] for views in self.per_part_view.values()
                if cam_id in views]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def view_ids(self) -> list[str]:
        ids: set[str] = set()
        for views in self.per_part_view.values():
            ids.update(views)
        return sorted(ids)

    @property
    def aggregate(self) -> float:
        scores = [self.view_score(cid) for cid in self.view_ids]
        return float(np.mean(scores)) if scores else float("nan")


def multicrop_score(pose3d: Pose3D, rig: Rig, layout: KeypointLayout,
                    models: dict[str, RefinerNet],
                    detections: dict[str, Pose2D] | None = None,
                    iterations: int = 10, sigma_px: float = 3.0) -> QualityScore:
    """Score alignment by refining four corner-placed crops per part and view.

    Each crop is refined independently; predictions are mapped back through
    the exact inverse crop transform and compared with the original
    projection. A (view, part) whose projection leaves the image is skipped.
    """
    scores: dict[str, dict[str, float]] = {}
    skipped: list[tuple[str, str]] = []
    for part in ("face", "left_hand", "right_hand"):
        model = models[PART_MODEL[part]]
        idx = layout.part_indices(part)
        scores.setdefault(part, {})
        for cam in rig.cameras:
            proj = project(pose3d.coords, cam)[idx]
            if not in_image_bounds(proj, cam).all():
                skipped.append((cam.cam_id, part))
                continue
            if detections is not None:
                det = detections[cam.cam_id]
                ev_img, ev_vis = det.coords[idx], det.visibility[idx]
            else:
                ev_img, ev_vis = proj, np.ones(len(idx), dtype=bool)
            frame = fit_source_frame(proj)
            src = frame.to_source(proj)
            ev_src = frame.to_source(ev_img)
            devs = []
            for crop in corner_crops(src):
                evidence = CropEvidence(crop.to_crop(ev_src), ev_vis, sigma_px)
                refined, _ = refine(model, evidence, crop.to_crop(src), iterations)
                back = frame.to_image(crop.to_source(refined))
                devs.append(np.linalg.norm(back - proj, axis=-1).mean())
            scores[part][cam.cam_id] = float(np.mean(devs))
    return QualityScore(scores, tuple(skipped))


@dataclass(frozen=True)
class ProcessedPose:
    pose_id: str
    subject: str
    pose3d: Pose3D
    classification: PoseClass
    provenance: tuple[str, ...]  # per keypoint: triangulated | completed | refined
    quality: QualityScore | None = None


@dataclass
class PipelineReport:
    counts: dict[str, int] = field(default_factory=lambda: {
        "complete": 0, "incomplete": 0, "rejected": 0})
    stage_seconds: dict[str, float] = field(default_factory=dict)
    quota: int | None = None
    retained_ids: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def processed(self) -> int:
        return sum(self.counts.values())

    @property
    def retained(self) -> int:
        return self.counts["complete"] + self.counts["incomplete"]

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "stage_seconds": {k: round(v, 3) for k, v in self.stage_seconds.items()},
            "quota": self.quota,
            "retained_ids": list(self.retained_ids),
            "failures": list(self.failures),
        }


@dataclass
class PipelineConfig:
    refine_iterations: int = 10
    sigma_px: float = 3.0
    score_poses: bool = True
    quota_per_subject: int | None = 50  # the source-scale value is 5000


def _tick(report: PipelineReport, stage: str, t0: float) -> float:
    t1 = time.perf_counter()
    report.stage_seconds[stage] = report.stage_seconds.get(stage, 0.0) + (t1 - t0)
    return t1


def run_pipeline(detection_sets: list[DetectionSet], rig: Rig,
                 layout: KeypointLayout,
                 completion_model: CompletionNet | None = None,
                 refiner_models: dict[str, RefinerNet] | None = None,
                 config: PipelineConfig | None = None
                 ) -> tuple[list[ProcessedPose], PipelineReport]:
    """Run the staged construction over a batch of detection sets.

    Rejected poses (a keypoint unseen in all views) are dropped; per-sample
    failures are quarantined into the report and never abort the batch.
    Every retained pose is complete, with per-keypoint provenance flags.
    """
    config = config or PipelineConfig()
    report = PipelineReport()
    results: list[ProcessedPose] = []
    for det in detection_sets:
        try:
            t0 = time.perf_counter()
            tri = triangulate_pose(det.views, rig)
            cls = classify_pose(tri.statuses)
            t0 = _tick(report, "triangulate", t0)
            if cls is PoseClass.REJECTED:
                report.counts["rejected"] += 1
                continue
            report.counts[cls.value] += 1

            provenance = np.where(tri.triangulated, "triangulated", "completed")
            if cls is PoseClass.COMPLETE:
                pose = Pose3D(tri.coords, frame="world")
            else:
                if completion_model is None:
                    raise ValueError("incomplete pose but no completion model")
                pose, _ = complete_pose(completion_model, tri.coords,
                                        tri.triangulated)
            t0 = _tick(report, "complete", t0)

            quality = None
            if refiner_models:
                pose, refined_mask, _ = refine_pose_views(
                    pose, det.views, rig, layout, refiner_models,
                    iterations=config.refine_iterations,
                    sigma_px=config.sigma_px)
                provenance = np.where(refined_mask, "refined", provenance)
                t0 = _tick(report, "refine", t0)
                if config.score_poses:
                    quality = multicrop_score(
                        pose, rig, layout, refiner_models, det.views,
                        iterations=config.refine_iterations,
                        sigma_px=config.sigma_px)
                    _tick(report, "score", t0)
            results.append(ProcessedPose(det.pose_id, det.subject, pose, cls,
                                         tuple(provenance), quality))
        except Exception as exc:  # quarantine, never abort the batch
            report.failures.append({"pose_id": det.pose_id, "error": str(exc)})
    if config.quota_per_subject is not None and config.score_poses \
            and refiner_models:
        scored = [(p.pose_id, p.subject, p.quality.aggregate) for p in results
                  if p.quality is not None]
        report.quota = config.quota_per_subject
        report.retained_ids = select_subset(scored, config.quota_per_subject)
    else:
        report.retained_ids = [p.pose_id for p in results]
    return results, report


def select_subset(scored: list[tuple[str, str, float]],
                  quota_per_subject: int) -> list[str]:
    """Keep the quota lowest-scoring pose ids per subject.

    Ascending score, ties broken by sample id; a quota above the available
    count retains everything for that subject. Output order is sorted by id,
    so the result is invariant under input shuffling.
    """
    by_subject: dict[str, list[tuple[float, str]]] = {}
    for pose_id, subject, score in scored:
        by_subject.setdefault(subject, []).append((score, pose_id))
    retained: list[str] = []
    for subject, entries in by_subject.items():
        entries.sort(key=lambda e: (e[0], e[1]))
        retained.extend(pid for _, pid in entries[:quota_per_subject])
    return sorted(retained)
