"""Request/response models of the cross-check annotation API."""
from __future__ import annotations

from pydantic import BaseModel, Field


class KeypointCorrection(BaseModel):
    index: int = Field(ge=1, le=133, description="1-based keypoint index")
    u: float
    v: float


class CorrectionSubmission(BaseModel):
    annotator: str = Field(min_length=1, max_length=64)
    corrections: list[KeypointCorrection] = Field(default_factory=list)


class CorrectionAck(BaseModel):
    sample_id: str
    view: str
    annotator: str
    accepted: int
    superseded: bool


class SampleSummary(BaseModel):
    id: str
    subject: str
    views: list[str]


class SampleListResponse(BaseModel):
    samples: list[SampleSummary]
    review_seed: int


class SamplePayload(BaseModel):
    id: str
    subject: str
    view: str
    image: str
    image_size: tuple[int, int]
    keypoints: list[tuple[float, float]]  # 133 projected points, pixels
    visibility: list[bool]                # of the stored detections
    layout: dict


class PartErrors(BaseModel):
    mean_2d_px: float
    mean_3d_mm: float
    count_2d: int
    count_3d: int


class CrossCheckResponse(BaseModel):
    parts: dict[str, PartErrors]
    histogram_3d_mm: dict[str, list[float]]  # bin edges and counts
    corrected_keypoints: int
    coverage: dict[str, int]
