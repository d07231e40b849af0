"""133-keypoint whole-body layout, pose value types, and pose operations.

The layout follows the COCO-WholeBody ordering: body 1-23 (17 classic joints
plus 6 foot keypoints), face 24-91 (68 landmarks), left hand 92-112 and right
hand 113-133 (21 keypoints each). All indices in interfaces and files are
1-based; internal numpy storage is 0-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PART_TAGS = ("all", "body", "face", "left_hand", "right_hand", "hands")

ROOT_TAGS = ("pelvis", "nose", "left_wrist", "right_wrist")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class KeypointLayout:
    """Index map of the 133-keypoint whole-body skeleton.

    Ranges are 1-based inclusive intervals; ``mirror_pairs`` lists
    (left index, right index) and ``bones`` lists (parent, child), both
    1-based. Use :meth:`part_indices` for 0-based numpy indexing.
    """

    total: int
    body_range: tuple[int, int]
    face_range: tuple[int, int]
    left_hand_range: tuple[int, int]
    right_hand_range: tuple[int, int]
    nose_index: int
    hip_indices: tuple[int, int]
    left_wrist_index: int
    right_wrist_index: int
    mirror_pairs: tuple[tuple[int, int], ...]
    bones: tuple[tuple[int, int], ...]
    schema_version: int = 1

    def __post_init__(self):
        ranges = [self.body_range, self.face_range,
                  self.left_hand_range, self.right_hand_range]
        covered = []
        for lo, hi in ranges:
            if not (1 <= lo <= hi <= self.total):
                raise ValueError(f"range ({lo},{hi}) outside 1..{self.total}")
            covered.extend(range(lo, hi + 1))
        if sorted(covered) != list(range(1, self.total + 1)):
            raise ValueError("part ranges do not partition the keypoint set")
        seen: dict[int, int] = {}
        for l, r in self.mirror_pairs:
            if l in seen or r in seen or l == r:
                raise ValueError("mirror pairs must form an involution")
            seen[l] = r
            seen[r] = l
        for p, c in self.bones:
            if not (1 <= p <= self.total and 1 <= c <= self.total):
                raise ValueError(f"bone ({p},{c}) out of range")

    @classmethod
    def from_dict(cls, doc: dict) -> "KeypointLayout":
        if "schema_version" not in doc:
            raise ValueError("layout file missing schema_version")
        if doc["schema_version"] != 1:
            raise ValueError(f"unsupported layout schema_version {doc['schema_version']}")
        r = doc["ranges"]
        return cls(
            total=doc["total"],
            body_range=tuple(r["body"]),
            face_range=tuple(r["face"]),
            left_hand_range=tuple(r["left_hand"]),
            right_hand_range=tuple(r["right_hand"]),
            nose_index=doc["nose"],
            hip_indices=tuple(doc["hips"]),
            left_wrist_index=doc["left_wrist"],
            right_wrist_index=doc["right_wrist"],
            mirror_pairs=tuple((l, r) for l, r in doc["mirror_pairs"]),
            bones=tuple((p, c) for p, c in doc["bones"]),
            schema_version=doc["schema_version"],
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "KeypointLayout":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "KeypointLayout":
        """The shipped COCO-WholeBody 133-keypoint layout."""
        data = resources.files("poseforge").joinpath("data/wholebody_layout.json")
        return cls.from_dict(json.loads(data.read_text()))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "total": self.total,
            "ranges": {
                "body": list(self.body_range),
                "face": list(self.face_range),
                "left_hand": list(self.left_hand_range),
                "right_hand": list(self.right_hand_range),
            },
            "nose": self.nose_index,
            "hips": list(self.hip_indices),
            "left_wrist": self.left_wrist_index,
            "right_wrist": self.right_wrist_index,
            "mirror_pairs": [list(p) for p in self.mirror_pairs],
            "bones": [list(b) for b in self.bones],
        }

    def part_indices(self, part: str) -> np.ndarray:
        """0-based indices of a part, in layout order."""
        if part == "all":
            return np.arange(self.total)
        if part == "hands":
            return np.concatenate([self.part_indices("left_hand"),
                                   self.part_indices("right_hand")])
        try:
            lo, hi = getattr(self, f"{part}_range")
        except AttributeError:
            raise ValueError(f"unknown part tag {part!r}; expected one of {PART_TAGS}") from None
        return np.arange(lo - 1, hi)

    def mirror_map(self) -> np.ndarray:
        """0-based involution array: m[i] = mirrored index of i (self for midline)."""
        m = np.arange(self.total)
        for l, r in self.mirror_pairs:
            m[l - 1] = r - 1
            m[r - 1] = l - 1
        return m

    def mirrored_bone_pairs(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        """Pairs of bones that are left/right mirrors of each other, 0-based.

        A bone with no mirrored counterpart in the bone list, or that mirrors
        onto itself (e.g. hip-hip), is excluded.
        """
        m = self.mirror_map()
        bone_set = {frozenset((p - 1, c - 1)) for p, c in self.bones}
        out = []
        done = set()
        for p, c in self.bones:
            a = frozenset((p - 1, c - 1))
            b = frozenset((int(m[p - 1]), int(m[c - 1])))
            if a == b or a in done or b not in bone_set:
                continue
            done.add(a)
            done.add(b)
            out.append((tuple(sorted(a)), tuple(sorted(b))))
        return out

    def face_halves(self) -> tuple[np.ndarray, np.ndarray]:
        """0-based (left half, right half) of the face; midline keypoints in both."""
        lo, hi = self.face_range
        face = set(range(lo - 1, hi))
        left, right = set(), set()
        for l, r in self.mirror_pairs:
            if l - 1 in face:
                left.add(l - 1)
                right.add(r - 1)
        midline = face - left - right
        return (np.array(sorted(left | midline)), np.array(sorted(right | midline)))


@dataclass(frozen=True)
class Pose3D:
    """133 keypoint positions in millimetres, in world or camera frame."""

    coords: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.shape != (133, 3):
            raise ValueError(f"expected (133, 3) coordinates, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("pose coordinates must be finite")
        if self.frame not in ("world", "camera"):
            raise ValueError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "coords", _freeze(c))

    def with_coords(self, coords: np.ndarray) -> "Pose3D":
        return Pose3D(coords, self.frame)


@dataclass(frozen=True)
class Pose2D:
    """133 pixel positions with per-keypoint visibility and confidence.

    A keypoint with ``visibility`` False is ignored by every consumer; its
    coordinates carry no meaning.
    """

    coords: np.ndarray
    visibility: np.ndarray
    confidence: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        v = np.asarray(self.visibility, dtype=bool)
        if c.shape != (133, 2):
            raise ValueError(f"expected (133, 2) coordinates, got {c.shape}")
        if v.shape != (133,):
            raise ValueError(f"expected (133,) visibility, got {v.shape}")
        if self.confidence is None:
            conf = v.astype(np.float64)
        else:
            conf = np.asarray(self.confidence, dtype=np.float64)
        if conf.shape != (133,):
            raise ValueError(f"expected (133,) confidence, got {conf.shape}")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidence must lie in [0, 1]")
        if not np.all(np.isfinite(c[v])):
            raise ValueError("visible keypoints must have finite coordinates")
        object.__setattr__(self, "coords", _freeze(c))
        object.__setattr__(self, "visibility", _freeze(v))
        object.__setattr__(self, "confidence", _freeze(conf))

    @property
    def num_visible(self) -> int:
        return int(self.visibility.sum())


def part_slice(pose: Pose3D | Pose2D | np.ndarray, part: str,
               layout: KeypointLayout) -> np.ndarray:
    """Coordinate rows of one part, order preserved."""
    idx = layout.part_indices(part)
    coords = pose.coords if isinstance(pose, (Pose3D, Pose2D)) else np.asarray(pose)
    return coords[idx]


def root_position(coords: np.ndarray, root: str, layout: KeypointLayout) -> np.ndarray:
    """Position of an alignment root; pelvis is the midpoint of the two hips."""
    if root == "pelvis":
        h1, h2 = layout.hip_indices
        return 0.5 * (coords[h1 - 1] + coords[h2 - 1])
    index = {
        "nose": layout.nose_index,
        "left_wrist": layout.left_wrist_index,
        "right_wrist": layout.right_wrist_index,
    }.get(root)
    if index is None:
        raise ValueError(f"unknown root {root!r}; expected one of {ROOT_TAGS}")
    return coords[index - 1].copy()


def center_on(pose: Pose3D, root: str, layout: KeypointLayout) -> Pose3D:
    """Subtract the root position from every joint."""
    offset = root_position(pose.coords, root, layout)
    return pose.with_coords(pose.coords - offset)


def mirror_pose(pose: Pose3D, layout: KeypointLayout, axis: int = 0) -> Pose3D:
    """Swap left/right keypoints and flip the lateral axis."""
    m = layout.mirror_map()
    coords = pose.coords[m].copy()
    coords[:, axis] = -coords[:, axis]
    return pose.with_coords(coords)


def bone_lengths(coords: np.ndarray, bones) -> np.ndarray:
    bones = np.asarray(bones)
    return np.linalg.norm(coords[bones[:, 0]] - coords[bones[:, 1]], axis=-1)


def symmetric_length_error(pose: Pose3D | np.ndarray, layout: KeypointLayout) -> float:
    """Sum over mirrored bone pairs of |left bone length - right bone length| in mm."""
    coords = pose.coords if isinstance(pose, Pose3D) else np.asarray(pose)
    total = 0.0
    for (a0, a1), (b0, b1) in layout.mirrored_bone_pairs():
        la = np.linalg.norm(coords[a0] - coords[a1])
        lb = np.linalg.norm(coords[b0] - coords[b1])
        total += abs(la - lb)
    return float(total)


@dataclass(frozen=True)
class MeanStdNormalizer:
    """Per-coordinate (x - mean) / std, with statistics fit on a training set."""

    mean: np.ndarray
    std: np.ndarray
    kind: str = field(default="mean_std", init=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(std <= 0):
            raise ValueError("degenerate input: zero standard deviation")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "std", _freeze(std))

    @classmethod
    def fit(cls, samples: np.ndarray, floor: float = 1e-8) -> "MeanStdNormalizer":
        """Fit per-coordinate statistics from stacked samples (n, k, d)."""
        samples = np.asarray(samples, dtype=np.float64)
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
        if np.any(std <= floor):
            raise ValueError("degenerate input: zero standard deviation")
        return cls(mean, std)

    def normalize(self, coords: np.ndarray) -> tuple[np.ndarray, None]:
        return (np.asarray(coords) - self.mean) / self.std, None

    def denormalize(self, coords: np.ndarray, aux: None = None) -> np.ndarray:
        return np.asarray(coords) * self.std + self.mean


@dataclass(frozen=True)
class PelvisFrobeniusNormalizer:
    """Pelvis-center then divide by the Frobenius norm of the centered pose.

    The per-pose (pelvis, norm) pair is returned as auxiliary state so the
    round trip is exact; at inference the scale is recovered from bounding-box
    statistics instead (see the benchmark rescaling).
    """

    layout: KeypointLayout
    kind: str = field(default="pelvis_frobenius", init=False)

    def normalize(self, coords: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, float]]:
        coords = np.asarray(coords, dtype=np.float64)
        pelvis = root_position(coords, "pelvis", self.layout)
        centered = coords - pelvis
        norm = float(np.linalg.norm(centered))
        if norm <= 0:
            raise ValueError("degenerate input: zero Frobenius norm after centering")
        return centered / norm, (pelvis, norm)

    def denormalize(self, coords: np.ndarray,
                    aux: tuple[np.ndarray, float]) -> np.ndarray:
        pelvis, norm = aux
        return np.asarray(coords) * norm + pelvis
