"""Benchmark annotation files: JSON-lines samples, split manifests, atomic writes.

One record per line: ``{"id", "subject", "camera", "image", "bbox": [4],
"kp2d": [133 x [u, v, vis]], "kp3d": [133 x [x, y, z]]}``. Files without a
confidence field are read with confidence 1.0 at visible keypoints.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import Pose2D, Pose3D

SCHEMA_VERSION = 1

TRAIN_SUBJECTS = ("S1", "S5", "S6", "S7")
TEST_SUBJECTS = ("S8",)
ALL_SUBJECTS = TRAIN_SUBJECTS + TEST_SUBJECTS


@dataclass(frozen=True)
class BenchmarkSample:
    """One {image, 2D pose, 3D pose} triplet as stored in annotation files."""

    sample_id: str
    subject: str
    camera_id: str
    image: str
    bbox: tuple[float, float, float, float]
    pose2d: Pose2D
    pose3d: Pose3D  # camera space

    @property
    def pose_key(self) -> str:
        """Groups the 4 views of one captured pose: sample id minus the camera."""
        return self.sample_id.rsplit("_", 1)[0]

    def to_record(self) -> dict:
        vis = self.pose2d.visibility
        kp2d = [[float(u) if v else 0.0, float(w) if v else 0.0, int(v)]
                for (u, w), v in zip(self.pose2d.coords, vis)]
        return {
            "id": self.sample_id,
            "subject": self.subject,
            "camera": self.camera_id,
            "image": self.image,
            "bbox": [float(b) for b in self.bbox],
            "kp2d": kp2d,
            "kp3d": [[float(x) for x in row] for row in self.pose3d.coords],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BenchmarkSample":
        kp2d = np.asarray(rec["kp2d"], dtype=np.float64)
        if kp2d.shape != (133, 3):
            raise ValueError(f"record {rec.get('id')}: kp2d shape {kp2d.shape}")
        vis = kp2d[:, 2] > 0
        pose2d = Pose2D(kp2d[:, :2], vis, vis.astype(np.float64))
        pose3d = Pose3D(np.asarray(rec["kp3d"], dtype=np.float64), frame="camera")
        return cls(rec["id"], rec["subject"], rec["camera"], rec["image"],
                   tuple(rec["bbox"]), pose2d, pose3d)


def visible_bbox(pose2d: Pose2D) -> tuple[float, float, float, float]:
    """Axis-aligned box over visible keypoints (u_min, v_min, u_max, v_max)."""
    pts = pose2d.coords[pose2d.visibility]
    if len(pts) == 0:
        raise ValueError("no visible keypoints to bound")
    return (float(pts[:, 0].min()), float(pts[:, 1].min()),
            float(pts[:, 0].max()), float(pts[:, 1].max()))


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_samples(samples, path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps(s.to_record(), separators=(",", ":")) for s in samples]
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def read_samples(path: str | Path) -> list[BenchmarkSample]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(BenchmarkSample.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed record: {exc}") from exc
    return out


@dataclass(frozen=True)
class DatasetManifest:
    """Names the annotation files and the sample-id membership of each split."""

    schema_version: int
    files: dict[str, str]         # split name -> annotation file
    splits: dict[str, list[str]]  # split name -> sample ids
    subjects: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "files": self.files,
            "splits": self.splits,
            "subjects": self.subjects,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        if "schema_version" not in doc:
            raise ValueError("manifest missing schema_version")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported manifest schema_version {doc['schema_version']}")
        return cls(doc["schema_version"], doc["files"], doc["splits"],
                   doc["subjects"])


def split_samples(samples, seed: int = 0) -> dict[str, list[BenchmarkSample]]:
    """Subject split plus the half/half partition of the test set.

    Train holds S1, S5, S6 and S7; test holds S8. Test pose-sets (all 4 views
    of one pose) are shuffled under the seed and alternated between the
    2D->3D task (``test_lift``) and the I2D->3D task (``test_ilift``) so the
    two task files are disjoint and together cover the test set.
    """
    train = [s for s in samples if s.subject in TRAIN_SUBJECTS]
    test = [s for s in samples if s.subject in TEST_SUBJECTS]
    other = [s for s in samples if s.subject not in ALL_SUBJECTS]
    if other:
        raise ValueError(f"unknown subjects: {sorted({s.subject for s in other})}")

    pose_keys = sorted({s.pose_key for s in test})
    rng = np.random.default_rng(seed)
    rng.shuffle(pose_keys)
    lift_keys = set(pose_keys[0::2])
    return {
        "train": train,
        "test_lift": [s for s in test if s.pose_key in lift_keys],
        "test_ilift": [s for s in test if s.pose_key not in lift_keys],
    }


def write_dataset(samples, out_dir: str | Path, seed: int = 0) -> DatasetManifest:
    """Write split annotation files and the manifest; all writes are atomic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = split_samples(samples, seed=seed)
    files = {}
    ids = {}
    subjects = {}
    for name, subset in splits.items():
        fname = f"{name}.jsonl"
        write_samples(subset, out_dir / fname)
        files[name] = fname
        ids[name] = [s.sample_id for s in subset]
        subjects[name] = sorted({s.subject for s in subset})
    manifest = DatasetManifest(SCHEMA_VERSION, files, ids, subjects)
    _atomic_write(out_dir / "manifest.json",
                  json.dumps(manifest.to_dict(), indent=1) + "\n")
    return manifest


def read_manifest(data_dir: str | Path) -> DatasetManifest:
    with open(Path(data_dir) / "manifest.json") as fh:
        return DatasetManifest.from_dict(json.load(fh))


def read_dataset(data_dir: str | Path,
                 split: str | None = None) -> dict[str, list[BenchmarkSample]]:
    """Read one split (or all) of a written dataset directory."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    names = [split] if split is not None else list(manifest.files)
    out = {}
    for name in names:
        samples = read_samples(data_dir / manifest.files[name])
        got = [s.sample_id for s in samples]
        if got != manifest.splits[name]:
            raise ValueError(f"split {name}: sample ids do not match manifest")
        out[name] = samples
    return out
