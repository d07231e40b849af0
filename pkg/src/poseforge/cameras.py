"""Pinhole cameras, a 4-view rig, DLT triangulation, and view selection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .skeleton import KeypointLayout, Pose2D


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class InsufficientViewsError(ValueError):
    """Fewer than two usable observations."""


class DegenerateGeometryError(ValueError):
    """Observation geometry cannot constrain a 3D point."""


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera: x_cam = R @ x_world + t, pixels = K @ x_cam / z."""

    cam_id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if K.shape != (3, 3) or R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("bad camera parameter shapes")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
            raise ValueError("rotation determinant must be +1")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix P = K [R | t]."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "id": self.cam_id,
            "K": self.intrinsics.tolist(),
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
            "size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        return cls(doc["id"], np.array(doc["K"]), np.array(doc["R"]),
                   np.array(doc["t"]), tuple(doc["size"]))


@dataclass(frozen=True)
class Rig:
    """Four calibrated cameras plus the unordered opposing-pair metadata.

    Opposing pairs declare the diagonally placed cameras whose baseline is
    unusable for triangulation on its own.
    """

    cameras: tuple[CameraModel, ...]
    opposing_pairs: frozenset[frozenset[str]]

    def __post_init__(self):
        if len(self.cameras) != 4:
            raise ValueError("a rig holds exactly 4 cameras")
        ids = {c.cam_id for c in self.cameras}
        if len(ids) != 4:
            raise ValueError("camera ids must be unique")
        pairs = frozenset(frozenset(p) for p in self.opposing_pairs)
        for pair in pairs:
            if len(pair) != 2 or not pair <= ids:
                raise ValueError(f"opposing pair {set(pair)} not a camera-id pair")
        object.__setattr__(self, "opposing_pairs", pairs)

    @property
    def camera_ids(self) -> list[str]:
        return [c.cam_id for c in self.cameras]

    def camera(self, cam_id: str) -> CameraModel:
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise KeyError(cam_id)

    def is_opposing(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.opposing_pairs

    def non_opposing_pairs(self) -> list[tuple[str, str]]:
        ids = sorted(self.camera_ids)
        return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]
                if not self.is_opposing(a, b)]

    def has_non_opposing_pair(self, cam_ids) -> bool:
        ids = sorted(set(cam_ids))
        return any(not self.is_opposing(a, b)
                   for i, a in enumerate(ids) for b in ids[i + 1:])

    def to_dict(self) -> dict:
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "opposing": [sorted(p) for p in sorted(self.opposing_pairs, key=sorted)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Rig":
        cams = tuple(CameraModel.from_dict(d) for d in doc["cameras"])
        return cls(cams, frozenset(frozenset(p) for p in doc["opposing"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Rig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def project(point3d: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Project world points (mm) to pixel coordinates.

    Accepts a single (3,) point or an (n, 3) batch; raises
    :class:`BehindCameraError` when any point has non-positive depth.
    """
    pts = np.atleast_2d(np.asarray(point3d, dtype=np.float64))
    cam_pts = pts @ camera.rotation.T + camera.translation
    depth = cam_pts[:, 2]
    if np.any(depth <= 0):
        raise BehindCameraError("point has non-positive depth in camera frame")
    uvw = cam_pts @ camera.intrinsics.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    return uv[0] if np.asarray(point3d).ndim == 1 else uv


def in_image_bounds(uv: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Flag projections falling inside the image (no clamping is ever applied)."""
    uv = np.atleast_2d(uv)
    w, h = camera.image_size
    return (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)


def triangulate(observations, rig: Rig | None = None,
                min_baseline_mm: float = 1.0,
                reweight_iterations: int = 2) -> tuple[np.ndarray, float]:
    """DLT triangulation of one point from (camera, (u, v)) observations.

    Stacks two homogeneous rows per observation, normalizes each row for
    conditioning, and solves the least-squares null space by SVD. The solve
    is then repeated with rows reweighted by the projective depth of the
    previous estimate, which turns the algebraic residual into the geometric
    one (the standard iterative refinement of the linear method). Returns the
    world point and the RMS reprojection residual in pixels.
    """
    observations = list(observations)
    if len(observations) < 2:
        raise InsufficientViewsError(f"need >=2 observations, got {len(observations)}")
    centers = np.array([cam.center for cam, _ in observations])
    spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    if spread < min_baseline_mm:
        raise DegenerateGeometryError("observations share a single camera center")
    if rig is not None and not rig.has_non_opposing_pair(
            cam.cam_id for cam, _ in observations):
        raise DegenerateGeometryError("all observing camera pairs are opposing")

    rows = []
    for cam, (u, v) in observations:
        P = cam.projection_matrix
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    base = np.array(rows)

    def solve(A: np.ndarray) -> np.ndarray:
        _, _, vh = np.linalg.svd(A)
        hom = vh[-1]
        if abs(hom[3]) < 1e-12 * np.abs(hom[:3]).max():
            raise DegenerateGeometryError("triangulated point at infinity")
        return hom

    hom = solve(base / np.linalg.norm(base, axis=1, keepdims=True))
    for _ in range(reweight_iterations):
        weights = np.empty(len(base))
        for i, (cam, _) in enumerate(observations):
            w = cam.projection_matrix[2] @ hom
            if abs(w) < 1e-12:
                raise DegenerateGeometryError("estimate collapsed to a camera plane")
            weights[2 * i] = weights[2 * i + 1] = w / hom[3]
        hom = solve(base / weights[:, None])
    point = hom[:3] / hom[3]

    sq = [np.sum((project(point, cam) - np.asarray(uv)) ** 2)
          for cam, uv in observations]
    return point, float(np.sqrt(np.mean(sq)))


class KeypointStatus(Enum):
    TRIANGULATED = "triangulated"
    SEEN_ONCE = "seen_once"
    OPPOSING_ONLY = "opposing_only"
    UNSEEN = "unseen"


@dataclass(frozen=True)
class TriangulationResult:
    """Per-keypoint triangulation of a pose: coordinates are NaN wherever the
    status is not TRIANGULATED."""

    coords: np.ndarray
    statuses: tuple[KeypointStatus, ...]
    residuals: np.ndarray

    @property
    def triangulated(self) -> np.ndarray:
        return np.array([s is KeypointStatus.TRIANGULATED for s in self.statuses])


def triangulate_pose(views: dict[str, Pose2D], rig: Rig,
                     use_all_views: bool = True) -> TriangulationResult:
    """Triangulate every keypoint visible in at least 2 non-opposing views.

    ``views`` maps camera id to the observed 2D pose. A keypoint visible only
    within an opposing pair gets OPPOSING_ONLY (not triangulated, not
    seen-once); with ``use_all_views`` False only the first non-opposing pair
    of views is used per keypoint instead of every visible view.
    """
    total = next(iter(views.values())).coords.shape[0]
    coords = np.full((total, 3), np.nan)
    residuals = np.full(total, np.nan)
    statuses = []
    for k in range(total):
        seen = [cid for cid, pose in views.items() if pose.visibility[k]]
        if not seen:
            statuses.append(KeypointStatus.UNSEEN)
            continue
        if len(seen) == 1:
            statuses.append(KeypointStatus.SEEN_ONCE)
            continue
        if not rig.has_non_opposing_pair(seen):
            statuses.append(KeypointStatus.OPPOSING_ONLY)
            continue
        if use_all_views:
            use = seen
        else:
            use = next([a, b] for i, a in enumerate(sorted(seen))
                       for b in sorted(seen)[i + 1:] if not rig.is_opposing(a, b))
        obs = [(rig.camera(cid), views[cid].coords[k]) for cid in use]
        coords[k], residuals[k] = triangulate(obs, rig)
        statuses.append(KeypointStatus.TRIANGULATED)
    return TriangulationResult(coords, tuple(statuses), residuals)


class PoseClass(Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    REJECTED = "rejected"


def classify_pose(statuses) -> PoseClass:
    """complete: all triangulated; incomplete: every keypoint seen in >=1 view
    but some not triangulated; rejected: some keypoint unseen everywhere."""
    statuses = list(statuses)
    if all(s is KeypointStatus.TRIANGULATED for s in statuses):
        return PoseClass.COMPLETE
    if any(s is KeypointStatus.UNSEEN for s in statuses):
        return PoseClass.REJECTED
    return PoseClass.INCOMPLETE


def view_variance(points2d: np.ndarray) -> float:
    """Spread score of a 2D keypoint set: trace of the coordinate covariance."""
    pts = np.asarray(points2d, dtype=np.float64)
    return float(pts[:, 0].var() + pts[:, 1].var())


def select_views(projections: dict[str, np.ndarray], rig: Rig,
                 aggregate: str = "min") -> tuple[str, str]:
    """Pick the non-opposing camera pair with the best variance score.

    Each view is scored by :func:`view_variance` of the part's projected
    keypoints; candidate pairs are ranked by the minimum (default) or mean of
    the two view scores, ties broken by the lexicographically lowest id pair.
    """
    if aggregate not in ("min", "mean"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    scores = {cid: view_variance(pts) for cid, pts in projections.items()}
    best: tuple[str, str] | None = None
    best_score = -np.inf
    for a, b in rig.non_opposing_pairs():
        if a not in scores or b not in scores:
            continue
        s = min(scores[a], scores[b]) if aggregate == "min" \
            else 0.5 * (scores[a] + scores[b])
        if s > best_score or (s == best_score and best is not None and (a, b) < best):
            best, best_score = (a, b), s
    if best is None:
        raise InsufficientViewsError("no non-opposing pair among scored views")
    return best
