import json

import numpy as np
import pytest

from poseforge.cameras import project
from poseforge.dataio import (
    BenchmarkSample,
    DatasetManifest,
    read_dataset,
    read_samples,
    split_samples,
    visible_bbox,
    write_dataset,
    write_samples,
)
from poseforge.skeleton import Pose2D, Pose3D
from poseforge.synthetic import OcclusionConfig, simulate_detections


def make_samples(generator, rig, layout, subjects, poses_per_subject=5,
                 start_seed=0):
    """Dataset-internal-consistent samples: pose2d is the exact projection."""
    samples = []
    seed = start_seed
    for subject in subjects:
        for p in range(poses_per_subject):
            pose = generator.generate(seed)
            seed += 1
            views = simulate_detections(pose, rig, layout,
                                        OcclusionConfig().disabled(), seed=seed)
            for cam in rig.cameras:
                pose_cam = pose.coords @ cam.rotation.T + cam.translation
                det = views[cam.cam_id]
                samples.append(BenchmarkSample(
                    sample_id=f"{subject}_p{p:04d}_{cam.cam_id}",
                    subject=subject,
                    camera_id=cam.cam_id,
                    image=f"render://{subject}_p{p:04d}_{cam.cam_id}",
                    bbox=visible_bbox(det),
                    pose2d=det,
                    pose3d=Pose3D(pose_cam, frame="camera"),
                ))
    return samples


@pytest.fixture(scope="module")
def samples(generator, rig, layout):
    return make_samples(generator, rig, layout,
                        ["S1", "S5", "S6", "S7", "S8"], poses_per_subject=5)


class TestRecords:
    def test_round_trip_exact(self, samples, tmp_path):
        path = tmp_path / "subset.jsonl"
        write_samples(samples[:100], path)
        loaded = read_samples(path)
        assert len(loaded) == 100
        for a, b in zip(samples[:100], loaded):
            assert a.sample_id == b.sample_id
            vis = a.pose2d.visibility
            assert np.array_equal(vis, b.pose2d.visibility)
            assert np.abs(a.pose2d.coords[vis] - b.pose2d.coords[vis]).max() < 1e-9
            assert np.abs(a.pose3d.coords - b.pose3d.coords).max() < 1e-9
            assert a.bbox == pytest.approx(b.bbox, abs=1e-9)

    def test_internal_2d3d_consistency(self, samples, rig):
        for s in samples[:40]:
            cam = rig.camera(s.camera_id)
            world = (s.pose3d.coords - cam.translation) @ cam.rotation
            reproj = project(world, cam)
            vis = s.pose2d.visibility
            err = np.abs(reproj[vis] - s.pose2d.coords[vis]).max()
            assert err <= 0.5

    def test_bbox_contains_visible_keypoints(self, samples):
        for s in samples[:40]:
            pts = s.pose2d.coords[s.pose2d.visibility]
            u0, v0, u1, v1 = s.bbox
            assert (pts[:, 0] >= u0 - 1e-9).all() and (pts[:, 0] <= u1 + 1e-9).all()
            assert (pts[:, 1] >= v0 - 1e-9).all() and (pts[:, 1] <= v1 + 1e-9).all()

    def test_malformed_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "x"}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            read_samples(path)


class TestSplits:
    def test_subject_split_80_20(self, samples):
        # 25 pose-sets x 4 views over 5 subjects: 80 train / 20 test records
        splits = split_samples(samples)
        assert len(splits["train"]) == 80
        assert len(splits["test_lift"]) + len(splits["test_ilift"]) == 20

    def test_no_subject_in_both(self, samples):
        splits = split_samples(samples)
        train_subjects = {s.subject for s in splits["train"]}
        test_subjects = {s.subject for s in splits["test_lift"]
                         + splits["test_ilift"]}
        assert not train_subjects & test_subjects

    def test_task_files_disjoint_and_covering(self, samples):
        splits = split_samples(samples)
        lift = {s.sample_id for s in splits["test_lift"]}
        ilift = {s.sample_id for s in splits["test_ilift"]}
        test_all = {s.sample_id for s in samples if s.subject == "S8"}
        assert not lift & ilift
        assert lift | ilift == test_all

    def test_task_split_by_pose_set(self, samples):
        # all 4 views of one pose land in the same task file
        splits = split_samples(samples)
        lift_keys = {s.pose_key for s in splits["test_lift"]}
        ilift_keys = {s.pose_key for s in splits["test_ilift"]}
        assert not lift_keys & ilift_keys

    def test_split_seed_reproducible(self, samples):
        a = split_samples(samples, seed=3)
        b = split_samples(samples, seed=3)
        assert [s.sample_id for s in a["test_lift"]] == \
            [s.sample_id for s in b["test_lift"]]

    def test_unknown_subject_rejected(self, samples):
        bad = samples[0]
        renamed = BenchmarkSample("X9_p0_c1", "X9", bad.camera_id, bad.image,
                                  bad.bbox, bad.pose2d, bad.pose3d)
        with pytest.raises(ValueError, match="unknown subjects"):
            split_samples(samples + [renamed])


class TestDatasetDirectory:
    def test_write_read_round_trip(self, samples, tmp_path):
        out = tmp_path / "data"
        manifest = write_dataset(samples, out)
        assert set(manifest.files) == {"train", "test_lift", "test_ilift"}
        loaded = read_dataset(out)
        for name, subset in loaded.items():
            assert [s.sample_id for s in subset] == manifest.splits[name]

    def test_schema_version_mismatch_rejected(self, samples, tmp_path):
        out = tmp_path / "data"
        write_dataset(samples, out)
        doc = json.loads((out / "manifest.json").read_text())
        doc["schema_version"] = 99
        (out / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="schema_version"):
            read_dataset(out)

    def test_no_temp_files_left_behind(self, samples, tmp_path):
        out = tmp_path / "data"
        write_dataset(samples, out)
        leftovers = [p for p in out.iterdir() if p.suffix == ".tmp"]
        assert not leftovers
