"""FastAPI application for the human-in-the-loop cross-check study.

Serves review samples with freshly projected skeletons, persists drag-drop
corrections, and reports the 2D/3D cross-check error tables. Synthetic
heatmap renders stand in for images, so the whole workflow is demo-able.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import Response
from fastapi.staticfiles import StaticFiles

from ..cameras import Rig, project
from ..dataio import read_dataset, read_manifest
from ..skeleton import KeypointLayout, Pose3D
from ..synthetic import render_heatmaps
from .report import ReviewPose, compute_crosscheck
from .schemas import (
    CorrectionAck,
    CorrectionSubmission,
    CrossCheckResponse,
    SampleListResponse,
    SamplePayload,
    SampleSummary,
)
from .store import CorrectionStore


class ReviewState:
    """Dataset, rig, review-set sampling, and the correction store."""

    def __init__(self, data_dir: str | Path, rig: Rig, layout: KeypointLayout,
                 corrections_path: str | Path, review_size: int = 60,
                 seed: int = 0):
        self.rig = rig
        self.layout = layout
        self.seed = seed
        splits = read_dataset(data_dir)
        samples = [s for subset in splits.values() for s in subset]
        self.samples_by_id = {s.sample_id: s for s in samples}

        pose_keys: dict[str, dict[str, str]] = {}
        for s in samples:
            pose_keys.setdefault(s.pose_key, {})[s.camera_id] = s.sample_id
        complete_keys = sorted(k for k, v in pose_keys.items()
                               if set(v) == set(rig.camera_ids))
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.permutation(complete_keys)[:review_size].tolist())
        self.review: dict[str, ReviewPose] = {}
        for key in chosen:
            views = pose_keys[key]
            first = self.samples_by_id[next(iter(sorted(views.values())))]
            cam = rig.camera(first.camera_id)
            world = (first.pose3d.coords - cam.translation) @ cam.rotation
            self.review[key] = ReviewPose(
                key, first.subject, Pose3D(world, frame="world"), views)
        self.store = CorrectionStore(corrections_path)

    def pose(self, pose_key: str) -> ReviewPose:
        pose = self.review.get(pose_key)
        if pose is None:
            raise HTTPException(404, f"sample {pose_key} is not in the review set")
        return pose


def create_app(data_dir: str | Path, rig: Rig, layout: KeypointLayout,
               corrections_path: str | Path, review_size: int = 60,
               seed: int = 0, ui_dir: str | Path | None = None) -> FastAPI:
    state = ReviewState(data_dir, rig, layout, corrections_path,
                        review_size, seed)
    app = FastAPI(title="poseforge cross-check service")
    app.state.review = state

    @app.get("/api/samples", response_model=SampleListResponse)
    def list_samples() -> SampleListResponse:
        return SampleListResponse(
            samples=[SampleSummary(id=p.pose_key, subject=p.subject,
                                   views=sorted(p.view_samples))
                     for p in state.review.values()],
            review_seed=state.seed,
        )

    @app.get("/api/samples/{pose_key}", response_model=SamplePayload)
    def get_sample(pose_key: str, view: str = Query(default="c1")) -> SamplePayload:
        pose = state.pose(pose_key)
        if view not in pose.view_samples:
            raise HTTPException(404, f"unknown view {view}")
        cam = state.rig.camera(view)
        projected = project(pose.world.coords, cam)
        stored = state.samples_by_id[pose.view_samples[view]]
        return SamplePayload(
            id=pose_key,
            subject=pose.subject,
            view=view,
            image=f"/api/samples/{pose_key}/render?view={view}",
            image_size=cam.image_size,
            keypoints=[(float(u), float(v)) for u, v in projected],
            visibility=stored.pose2d.visibility.tolist(),
            layout=state.layout.to_dict(),
        )

    @app.get("/api/samples/{pose_key}/render")
    def get_render(pose_key: str, view: str = Query(default="c1"),
                   scale: int = Query(default=2, ge=1, le=8)) -> Response:
        from PIL import Image

        pose = state.pose(pose_key)
        if view not in pose.view_samples:
            raise HTTPException(404, f"unknown view {view}")
        cam = state.rig.camera(view)
        stored = state.samples_by_id[pose.view_samples[view]]
        w, h = cam.image_size
        det = stored.pose2d
        render = render_heatmaps(det.coords / scale, det.visibility,
                                 (w // scale, h // scale), sigma_px=2.0)
        gray = (render.composite() * 255).astype(np.uint8)
        img = Image.fromarray(gray, mode="L").resize((w, h), Image.BILINEAR)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(buf.getvalue(), media_type="image/png")

    @app.post("/api/samples/{pose_key}/corrections",
              response_model=CorrectionAck)
    def post_corrections(pose_key: str, body: CorrectionSubmission,
                         view: str = Query(default="c1")) -> CorrectionAck:
        pose = state.pose(pose_key)
        if view not in pose.view_samples:
            raise HTTPException(404, f"unknown view {view}")
        w, h = state.rig.camera(view).image_size
        for c in body.corrections:
            if not (0 <= c.u < w and 0 <= c.v < h):
                raise HTTPException(
                    422, f"keypoint {c.index} correction ({c.u}, {c.v}) "
                         f"is outside the {w}x{h} image")
        rec, superseded = state.store.submit(
            pose_key, view, body.annotator,
            [(c.index, c.u, c.v) for c in body.corrections])
        return CorrectionAck(sample_id=pose_key, view=view,
                             annotator=body.annotator,
                             accepted=len(rec.corrections),
                             superseded=superseded)

    @app.get("/api/report", response_model=CrossCheckResponse)
    def get_report() -> CrossCheckResponse:
        doc = compute_crosscheck(state.store.snapshot(), state.review,
                                 state.rig, state.layout)
        return CrossCheckResponse(**doc)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")
    return app
