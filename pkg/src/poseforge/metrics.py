"""MPJPE metric variants, bounding-box rescaling, and the I2D test-set mask."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import KeypointLayout, Pose2D, Pose3D, root_position

# alignment root -> parts it may be combined with
_VALID_ALIGNMENT = {
    "pelvis": {"all", "body", "face", "left_hand", "right_hand", "hands"},
    "nose": {"face"},
    "wrist": {"hands", "left_hand", "right_hand"},
}


def _center(coords: np.ndarray, root: str, layout: KeypointLayout) -> np.ndarray:
    return coords - root_position(coords, root, layout)


def mean_joint_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """The MPJPE core: mean Euclidean distance over matched joints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpjpe(pred: Pose3D | np.ndarray, gt: Pose3D | np.ndarray, part: str,
          alignment: str, layout: KeypointLayout) -> float:
    """Mean per-joint position error (mm) after centering both poses on the
    alignment root. Wrist alignment centers each hand on its own wrist."""
    allowed = _VALID_ALIGNMENT.get(alignment)
    if allowed is None:
        raise ValueError(f"unknown alignment {alignment!r}")
    if part not in allowed:
        raise ValueError(f"alignment {alignment!r} is incompatible with part {part!r}")
    p = pred.coords if isinstance(pred, Pose3D) else np.asarray(pred, dtype=np.float64)
    g = gt.coords if isinstance(gt, Pose3D) else np.asarray(gt, dtype=np.float64)

    if alignment == "wrist":
        parts = ("left_hand", "right_hand") if part == "hands" else (part,)
        dists = []
        for hand in parts:
            root = "left_wrist" if hand == "left_hand" else "right_wrist"
            idx = layout.part_indices(hand)
            d = np.linalg.norm(_center(p, root, layout)[idx]
                               - _center(g, root, layout)[idx], axis=-1)
            dists.append(d)
        return float(np.concatenate(dists).mean())

    idx = layout.part_indices(part)
    return mean_joint_distance(_center(p, alignment, layout)[idx],
                               _center(g, alignment, layout)[idx])


@dataclass(frozen=True)
class MetricReport:
    """The benchmark table row: pelvis-aligned part errors plus the
    nose-aligned face and wrist-aligned hand variants, in mm."""

    all: float
    body: float
    face: float
    face_aligned: float
    hand: float
    hand_aligned: float

    def to_dict(self) -> dict:
        return {
            "all": self.all, "body": self.body,
            "face": self.face, "face_aligned": self.face_aligned,
            "hand": self.hand, "hand_aligned": self.hand_aligned,
        }

    @classmethod
    def from_pair(cls, pred, gt, layout: KeypointLayout) -> "MetricReport":
        return cls(
            all=mpjpe(pred, gt, "all", "pelvis", layout),
            body=mpjpe(pred, gt, "body", "pelvis", layout),
            face=mpjpe(pred, gt, "face", "pelvis", layout),
            face_aligned=mpjpe(pred, gt, "face", "nose", layout),
            hand=mpjpe(pred, gt, "hands", "pelvis", layout),
            hand_aligned=mpjpe(pred, gt, "hands", "wrist", layout),
        )

    @classmethod
    def average(cls, reports: list["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("no reports to average")
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports]))
                      for k in ("all", "body", "face", "face_aligned",
                                "hand", "hand_aligned")})


def bbox_size(coords: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Bounding-box size of a pose: per-axis extents averaged to one scalar."""
    coords = np.asarray(coords, dtype=np.float64)
    if mask is not None:
        coords = coords[np.asarray(mask, dtype=bool)]
    if len(coords) == 0:
        raise ValueError("no keypoints to bound")
    return float((coords.max(axis=0) - coords.min(axis=0)).mean())


@dataclass(frozen=True)
class ScaleStats:
    """Mean training-set bounding-box sizes, fixed before any test access."""

    mean_3d: float  # mm
    mean_2d: float  # px

    def __post_init__(self):
        if self.mean_3d <= 0 or self.mean_2d <= 0:
            raise ValueError("scale statistics must be positive")

    @classmethod
    def fit(cls, poses3d: list[np.ndarray], poses2d: list[Pose2D]) -> "ScaleStats":
        s3 = np.mean([bbox_size(p.coords if isinstance(p, Pose3D) else p)
                      for p in poses3d])
        s2 = np.mean([bbox_size(p.coords, p.visibility) for p in poses2d])
        return cls(float(s3), float(s2))

    def to_dict(self) -> dict:
        return {"mean_3d": self.mean_3d, "mean_2d": self.mean_2d}


def input_bbox_size(pose2d: Pose2D) -> float:
    """2D box size over visible keypoints only (the I2D convention)."""
    return bbox_size(pose2d.coords, pose2d.visibility)


def rescale(x_unit: np.ndarray, stats: ScaleStats,
            input2d: Pose2D | None = None,
            sigma_2d: float | None = None) -> np.ndarray:
    """X_final = X_unit * mean3d * (sigma2d / mean2d).

    ``sigma_2d`` is taken from the visible bounding box of ``input2d`` unless
    given directly (the RGB task supplies a bbox instead of keypoints).
    """
    if sigma_2d is None:
        if input2d is None:
            raise ValueError("need input2d or sigma_2d")
        sigma_2d = input_bbox_size(input2d)
    if sigma_2d <= 0:
        raise ValueError("degenerate 2D input: zero bounding box")
    return np.asarray(x_unit, dtype=np.float64) * stats.mean_3d * (sigma_2d / stats.mean_2d)


@dataclass(frozen=True)
class I2DMaskProtocol:
    """Mutually exclusive test-mask branches, applied once under a fixed seed."""

    keypoint_branch_prob: float = 0.40
    keypoint_rate: float = 0.25
    face_prob: float = 0.20
    left_hand_prob: float = 0.20
    right_hand_prob: float = 0.20
    seed: int = 2023

    def __post_init__(self):
        total = (self.keypoint_branch_prob + self.face_prob
                 + self.left_hand_prob + self.right_hand_prob)
        if not np.isclose(total, 1.0):
            raise ValueError(f"branch probabilities sum to {total}, expected 1")

    @property
    def branch_probs(self) -> np.ndarray:
        return np.array([self.keypoint_branch_prob, self.face_prob,
                         self.left_hand_prob, self.right_hand_prob])

    def to_dict(self) -> dict:
        return {
            "branch_probs": {
                "keypoint": self.keypoint_branch_prob,
                "face": self.face_prob,
                "left_hand": self.left_hand_prob,
                "right_hand": self.right_hand_prob,
            },
            "keypoint_rate": self.keypoint_rate,
            "seed": self.seed,
        }


BRANCH_NAMES = ("keypoint", "face", "left_hand", "right_hand")


def sample_i2d_masks(layout: KeypointLayout, n: int,
                     protocol: I2DMaskProtocol,
                     seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw n I2D masks (True = masked) plus the branch index per pose."""
    rng = np.random.default_rng(protocol.seed if seed is None else seed)
    branches = rng.choice(4, size=n, p=protocol.branch_probs)
    masks = np.zeros((n, layout.total), dtype=bool)
    per_kp = rng.random((n, layout.total)) < protocol.keypoint_rate
    masks[branches == 0] = per_kp[branches == 0]
    for b, part in ((1, "face"), (2, "left_hand"), (3, "right_hand")):
        rows = np.where(branches == b)[0]
        masks[np.ix_(rows, layout.part_indices(part))] = True
    return masks, branches


def apply_i2d_mask(poses: list[Pose2D], layout: KeypointLayout,
                   protocol: I2DMaskProtocol) -> tuple[list[Pose2D], dict]:
    """Mask the test 2D poses once; the record makes the masking replayable
    so every method sees identical inputs."""
    masks, branches = sample_i2d_masks(layout, len(poses), protocol)
    masked = []
    for pose, m in zip(poses, masks):
        vis = pose.visibility & ~m
        coords = np.where(vis[:, None], pose.coords, 0.0)
        conf = np.where(vis, pose.confidence, 0.0)
        masked.append(Pose2D(coords, vis, conf))
    record = {
        "protocol": protocol.to_dict(),
        "branches": [BRANCH_NAMES[b] for b in branches],
        "masked_indices": [list(map(int, np.where(m)[0] + 1)) for m in masks],
    }
    return masked, record


def write_mask_record(record: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(record, separators=(",", ":")) + "\n")


def read_mask_record(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
