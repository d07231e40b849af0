"""Synthetic whole-body poses, a calibrated 4-camera rig, detector-failure
simulation, and heatmap renders standing in for real imagery.

The generated skeleton is a standing ~1.75 m template articulated by rigid
subtree rotations, so every bone keeps its template length and left/right
bone lengths stay exactly equal.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cameras import CameraModel, Rig, in_image_bounds, project
from .skeleton import KeypointLayout, Pose2D, Pose3D

MM = 1.0


def _face_template() -> np.ndarray:
    """68 landmarks (iBUG ordering) as offsets from the head anchor, mm.

    x is the subject's left, y points out of the face, z is up. Landmarks are
    numbered starting on the subject's right, hence the sign conventions.
    """
    pts = np.zeros((68, 3))
    # jaw 0-16, chin at 8
    for i in range(17):
        t = (i - 8) / 8.0
        pts[i] = (85.0 * np.sin(t * np.pi / 2), 55.0 - 25.0 * t * t,
                  -30.0 - 75.0 * np.cos(t * np.pi / 2))
    # right brow 17-21 (outer to inner), left brow 22-26 mirrors inner to outer
    brow_x = np.array([70, 55, 40, 25, 12], dtype=float)
    brow_z = np.array([40, 48, 52, 50, 46], dtype=float)
    for j in range(5):
        pts[17 + j] = (-brow_x[j], 70.0, brow_z[j])
        pts[22 + j] = (brow_x[4 - j], 70.0, brow_z[4 - j])
    # nose bridge 27-30 and bottom 31-35
    for j, (z, y) in enumerate([(30, 85), (10, 95), (-10, 105), (-30, 115)]):
        pts[27 + j] = (0.0, float(y), float(z))
    nose_x = np.array([-24, -12, 0, 12, 24], dtype=float)
    nose_y = np.array([95, 100, 105, 100, 95], dtype=float)
    for j in range(5):
        pts[31 + j] = (nose_x[j], nose_y[j], -45.0)
    # eyes: right 36-41, left 42-47
    eye_x = np.array([62, 52, 40, 30, 40, 52], dtype=float)
    eye_z = np.array([15, 22, 22, 15, 8, 8], dtype=float)
    for j in range(6):
        pts[36 + j] = (-eye_x[j], 72.0, eye_z[j])
        pts[42 + j] = (eye_x[3 - j] if j < 4 else eye_x[9 - j], 72.0,
                       eye_z[3 - j] if j < 4 else eye_z[9 - j])
    # outer lip 48-59
    outer = [(-38, -75), (-25, -68), (-10, -64), (0, -66), (10, -64), (25, -68),
             (38, -75), (25, -85), (10, -88), (0, -89), (-10, -88), (-25, -85)]
    for j, (x, z) in enumerate(outer):
        pts[48 + j] = (float(x), 80.0, float(z))
    # inner lip 60-67
    inner = [(-30, -76), (-10, -72), (0, -73), (10, -72), (30, -76),
             (12, -80), (0, -81), (-12, -80)]
    for j, (x, z) in enumerate(inner):
        pts[60 + j] = (float(x), 80.0, float(z))
    return pts * 0.9


def _hand_template(side: float) -> np.ndarray:
    """21 hand keypoints (wrist + 5 fingers x 4 joints), offsets from the wrist."""
    pts = np.zeros((21, 3))
    spread = np.deg2rad([-55.0, -18.0, 0.0, 16.0, 33.0])
    base_len = [45.0, 80.0, 85.0, 80.0, 70.0]
    seg_scale = [(0.9, 0.7, 0.55), (0.45, 0.32, 0.25), (0.5, 0.35, 0.27),
                 (0.47, 0.33, 0.25), (0.4, 0.3, 0.24)]
    down = np.array([0.0, 0.55, -1.0])
    down /= np.linalg.norm(down)
    lateral = np.array([side, 0.0, 0.0])
    for f in range(5):
        direction = np.cos(spread[f]) * down + np.sin(spread[f]) * lateral
        pos = direction * base_len[f]
        pts[1 + 4 * f] = pos
        for s, scale in enumerate(seg_scale[f]):
            pos = pos + direction * (base_len[f] * scale)
            pts[2 + 4 * f + s] = pos
    return pts


def template_pose() -> Pose3D:
    """Rest pose: standing subject at the origin, facing +y, pelvis at z=1000 mm."""
    c = np.zeros((133, 3))
    body = {
        0: (0, 95, 1620),                                  # nose
        1: (32, 100, 1650), 2: (-32, 100, 1650),           # eyes
        3: (72, 40, 1630), 4: (-72, 40, 1630),             # ears
        5: (190, 0, 1450), 6: (-190, 0, 1450),             # shoulders
        7: (225, 10, 1180), 8: (-225, 10, 1180),           # elbows
        9: (235, 25, 935), 10: (-235, 25, 935),            # wrists
        11: (120, 0, 1000), 12: (-120, 0, 1000),           # hips
        13: (128, 15, 550), 14: (-128, 15, 550),           # knees
        15: (132, -10, 80), 16: (-132, -10, 80),           # ankles
        17: (120, 160, 10), 18: (165, 140, 15), 19: (138, -70, 18),   # left foot
        20: (-120, 160, 10), 21: (-165, 140, 15), 22: (-138, -70, 18),  # right foot
    }
    for i, p in body.items():
        c[i] = p
    head_anchor = np.array([0.0, 40.0, 1640.0])
    c[23:91] = head_anchor + _face_template()
    c[91:112] = c[9] + _hand_template(side=+1.0)
    c[112:133] = c[10] + _hand_template(side=-1.0)
    return Pose3D(c, frame="world")


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# articulated subtrees: pivot keypoint, moved 0-based indices, axis freedom.
# torso and head pivot bones that cross into the fixed remainder on both
# sides (ear-shoulder, shoulder-hip), so they only pitch about the lateral
# x axis; that commutes with the left/right mirror and keeps bone lengths
# exactly symmetric. Limb subtrees rotate freely about their own parent.
_LEFT_HAND = list(range(91, 112))
_RIGHT_HAND = list(range(112, 133))
_JOINT_GROUPS: list[tuple[str, object, list[int], str]] = [
    ("torso", "pelvis", [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
     + list(range(23, 91)) + _LEFT_HAND + _RIGHT_HAND, "pitch"),
    ("head", "neck", [0, 1, 2, 3, 4] + list(range(23, 91)), "pitch"),
    ("shoulder", 5, [7, 9] + _LEFT_HAND, "any"),
    ("shoulder", 6, [8, 10] + _RIGHT_HAND, "any"),
    ("elbow", 7, [9] + _LEFT_HAND, "any"),
    ("elbow", 8, [10] + _RIGHT_HAND, "any"),
    ("wrist", 9, _LEFT_HAND, "any"),
    ("wrist", 10, _RIGHT_HAND, "any"),
    ("hip", 11, [13, 15, 17, 18, 19], "any"),
    ("hip", 12, [14, 16, 20, 21, 22], "any"),
    ("knee", 13, [15, 17, 18, 19], "any"),
    ("knee", 14, [16, 20, 21, 22], "any"),
]

DEFAULT_ARTICULATION = {
    "torso": 0.15, "head": 0.25, "shoulder": 0.45, "elbow": 0.5,
    "wrist": 0.35, "hip": 0.3, "knee": 0.4,
}


@dataclass(frozen=True)
class PoseGeneratorConfig:
    articulation: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_ARTICULATION))
    global_yaw: float = np.pi
    translation: tuple[float, float, float] = (300.0, 300.0, 150.0)


class SyntheticPoseGenerator:
    """Deterministic articulated-pose sampler over the rest-pose template."""

    def __init__(self, layout: KeypointLayout,
                 config: PoseGeneratorConfig | None = None):
        self.layout = layout
        self.config = config or PoseGeneratorConfig()
        self.template = template_pose()

    def _pivot(self, coords: np.ndarray, pivot) -> np.ndarray:
        if pivot == "pelvis":
            h1, h2 = self.layout.hip_indices
            return 0.5 * (coords[h1 - 1] + coords[h2 - 1])
        if pivot == "neck":
            return 0.5 * (coords[5] + coords[6])
        return coords[pivot]

    def generate(self, seed: int) -> Pose3D:
        rng = np.random.default_rng(seed)
        coords = self.template.coords.copy()
        for group, pivot, moved, axis_mode in _JOINT_GROUPS:
            limit = self.config.articulation.get(group, 0.0)
            axis = rng.standard_normal(3)
            angle = rng.uniform(-limit, limit)
            if limit <= 0.0 or angle == 0.0:
                continue
            if axis_mode == "pitch":
                axis = np.array([1.0, 0.0, 0.0])
            center = self._pivot(coords, pivot)
            R = _rotation(axis, angle)
            coords[moved] = (coords[moved] - center) @ R.T + center
        yaw = rng.uniform(-self.config.global_yaw, self.config.global_yaw)
        if yaw != 0.0:
            pelvis = self._pivot(coords, "pelvis")
            rz = _rotation(np.array([0.0, 0.0, 1.0]), yaw)
            coords = (coords - pelvis) @ rz.T + pelvis
        tx, ty, tz = self.config.translation
        coords = coords + rng.uniform([-tx, -ty, -tz], [tx, ty, tz])
        return Pose3D(coords, frame="world")

    def generate_batch(self, n: int, seed: int) -> list[Pose3D]:
        return [self.generate(seed + i) for i in range(n)]


def default_rig(distance_mm: float = 4200.0, height_mm: float = 1600.0,
                focal_px: float = 1250.0, image_size: tuple[int, int] = (1000, 1000),
                target=(0.0, 0.0, 1000.0)) -> Rig:
    """Four cameras at the corners of a square, diagonal pairs opposing.

    Mirrors the Human3.6M corner placement: cameras c1..c4 sit at azimuths
    45/135/225/315 degrees looking at the working-volume center, so (c1, c3)
    and (c2, c4) are the diagonal (opposing) pairs.
    """
    target = np.asarray(target, dtype=np.float64)
    w, h = image_size
    K = np.array([[focal_px, 0, w / 2], [0, focal_px, h / 2], [0, 0, 1.0]])
    cams = []
    for i, azimuth in enumerate((45.0, 135.0, 225.0, 315.0)):
        a = np.deg2rad(azimuth)
        center = np.array([distance_mm * np.cos(a), distance_mm * np.sin(a), height_mm])
        forward = target - center
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])  # rows: camera x, y, z in world
        t = -R @ center
        cams.append(CameraModel(f"c{i + 1}", K, R, t, image_size))
    return Rig(tuple(cams), frozenset({frozenset(("c1", "c3")),
                                       frozenset(("c2", "c4"))}))


def _per_view(value, cam_id: str) -> float:
    """Drop probabilities may be a scalar or a per-camera mapping."""
    if isinstance(value, dict):
        return float(value.get(cam_id, 0.0))
    return float(value)


@dataclass(frozen=True)
class OcclusionConfig:
    """Detector-failure model: pixel noise plus part-correlated dropouts.

    Each drop probability is either one float for every view or a
    ``{camera id: probability}`` mapping.
    """

    noise_sigma_px: float = 1.0
    keypoint_drop_prob: float | dict = 0.03
    hand_drop_prob: float | dict = 0.12
    face_half_drop_prob: float | dict = 0.06
    min_confidence: float = 0.6

    def disabled(self) -> "OcclusionConfig":
        return replace(self, noise_sigma_px=0.0, keypoint_drop_prob=0.0,
                       hand_drop_prob=0.0, face_half_drop_prob=0.0)


def simulate_detections(pose3d: Pose3D, rig: Rig, layout: KeypointLayout,
                        config: OcclusionConfig, seed: int) -> dict[str, Pose2D]:
    """Project a pose into all 4 views and corrupt it like a 2D detector would.

    Per view: Gaussian pixel noise, independent per-keypoint drops, whole-hand
    drops, and half-face drops. Projections outside the image are invisible.
    """
    rng = np.random.default_rng(seed)
    left_face, right_face = layout.face_halves()
    out = {}
    for cam in rig.cameras:
        uv = project(pose3d.coords, cam)
        visible = in_image_bounds(uv, cam)
        noisy = uv + rng.normal(0.0, config.noise_sigma_px, size=uv.shape) \
            if config.noise_sigma_px > 0 else uv.copy()
        drop = rng.random(layout.total) < _per_view(config.keypoint_drop_prob,
                                                    cam.cam_id)
        for hand in ("left_hand", "right_hand"):
            if rng.random() < _per_view(config.hand_drop_prob, cam.cam_id):
                drop[layout.part_indices(hand)] = True
        for half in (left_face, right_face):
            if rng.random() < _per_view(config.face_half_drop_prob, cam.cam_id):
                drop[half] = True
        visible &= ~drop
        conf = np.where(visible,
                        rng.uniform(config.min_confidence, 1.0, layout.total), 0.0)
        out[cam.cam_id] = Pose2D(noisy, visible, conf)
    return out


@dataclass(frozen=True)
class HeatmapRender:
    """Per-keypoint Gaussian-blob channels; invisible keypoints render empty."""

    channels: np.ndarray  # (k, h, w) float32
    sigma_px: float

    def composite(self) -> np.ndarray:
        return self.channels.max(axis=0)


def render_heatmaps(coords: np.ndarray, visibility: np.ndarray,
                    image_size: tuple[int, int], sigma_px: float = 3.0) -> HeatmapRender:
    """Unit-peak Gaussian blob per visible keypoint on an (h, w) grid.

    Blobs are written inside a +-3 sigma window only, which keeps dense
    whole-pose renders cheap.
    """
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    w, h = image_size
    coords = np.asarray(coords, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    channels = np.zeros((coords.shape[0], h, w), dtype=np.float32)
    reach = int(np.ceil(3 * sigma_px))
    for k in range(coords.shape[0]):
        if not visibility[k]:
            continue
        u, v = coords[k]
        x0, x1 = int(np.floor(u)) - reach, int(np.floor(u)) + reach + 1
        y0, y1 = int(np.floor(v)) - reach, int(np.floor(v)) + reach + 1
        x0, x1 = max(x0, 0), min(x1, w)
        y0, y1 = max(y0, 0), min(y1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1)
        ys = np.arange(y0, y1)
        gx = np.exp(-0.5 * ((xs - u) / sigma_px) ** 2)
        gy = np.exp(-0.5 * ((ys - v) / sigma_px) ** 2)
        channels[k, y0:y1, x0:x1] = np.maximum(
            channels[k, y0:y1, x0:x1], np.outer(gy, gx).astype(np.float32))
    return HeatmapRender(channels, sigma_px)
