import itertools

import numpy as np
import pytest

from poseforge.cameras import (
    BehindCameraError,
    CameraModel,
    DegenerateGeometryError,
    InsufficientViewsError,
    KeypointStatus,
    PoseClass,
    Rig,
    classify_pose,
    in_image_bounds,
    project,
    select_views,
    triangulate,
    triangulate_pose,
)
from poseforge.skeleton import Pose2D
from poseforge.synthetic import default_rig


def homogeneous_oracle(point, camera):
    """Independent projection: full 3x4 homogeneous matrix product."""
    P = camera.intrinsics @ np.hstack(
        [camera.rotation, camera.translation[:, None]])
    xh = P @ np.append(np.asarray(point, dtype=float), 1.0)
    return xh[:2] / xh[2]


def identity_camera(f=1000.0, size=(1000, 1000)):
    K = np.array([[f, 0, size[0] / 2], [0, f, size[1] / 2], [0, 0, 1.0]])
    return CameraModel("id", K, np.eye(3), np.zeros(3), size)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        cam = identity_camera()
        assert np.allclose(project(np.array([0.0, 0.0, 3000.0]), cam),
                           (500.0, 500.0))

    def test_focal_doubling_doubles_offset(self):
        p = np.array([120.0, -80.0, 2500.0])
        u1 = project(p, identity_camera(f=1000.0)) - 500.0
        u2 = project(p, identity_camera(f=2000.0)) - 500.0
        assert np.allclose(u2, 2.0 * u1)

    def test_matches_homogeneous_oracle(self, rig):
        rng = np.random.default_rng(0)
        for _ in range(50):
            point = rng.uniform([-800, -800, 200], [800, 800, 1800])
            for cam in rig.cameras:
                assert np.allclose(project(point, cam),
                                   homogeneous_oracle(point, cam), atol=1e-9)

    def test_behind_camera_rejected(self):
        cam = identity_camera()
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, -10.0]), cam)
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, 0.0]), cam)  # camera center itself

    def test_out_of_bounds_flagged_not_clamped(self):
        cam = identity_camera()
        uv = project(np.array([5000.0, 0.0, 1000.0]), cam)
        assert uv[0] > 1000.0  # not clamped
        assert not in_image_bounds(uv, cam)[0]

    def test_rotation_validation(self):
        K = np.eye(3) * 100.0
        K[2, 2] = 1.0
        with pytest.raises(ValueError, match="orthonormal"):
            CameraModel("bad", K, np.eye(3) * 1.01, np.zeros(3), (10, 10))


class TestTriangulate:
    def test_noiseless_round_trip(self, rig):
        rng = np.random.default_rng(1)
        for _ in range(25):
            point = rng.uniform([-600, -600, 100], [600, 600, 1900])
            obs = [(cam, project(point, cam)) for cam in rig.cameras]
            rec, residual = triangulate(obs, rig)
            assert np.abs(rec - point).max() < 1e-6
            assert residual < 1e-6

    def test_reordering_invariance(self, rig):
        point = np.array([100.0, -200.0, 1500.0])
        obs = [(cam, project(point, cam)) for cam in rig.cameras]
        a, _ = triangulate(obs, rig)
        b, _ = triangulate(list(reversed(obs)), rig)
        assert np.abs(a - b).max() < 1e-6

    def test_single_observation_rejected(self, rig):
        cam = rig.cameras[0]
        with pytest.raises(InsufficientViewsError):
            triangulate([(cam, (10.0, 10.0))])

    def test_identical_camera_poses_degenerate(self, rig):
        cam = rig.cameras[0]
        with pytest.raises(DegenerateGeometryError, match="camera center"):
            triangulate([(cam, (10.0, 10.0)), (cam, (12.0, 11.0))])

    def test_opposing_only_pair_degenerate(self, rig):
        point = np.array([0.0, 0.0, 1000.0])
        c1, c3 = rig.camera("c1"), rig.camera("c3")
        obs = [(c1, project(point, c1)), (c3, project(point, c3))]
        with pytest.raises(DegenerateGeometryError, match="opposing"):
            triangulate(obs, rig)

    def test_noisy_error_within_monte_carlo_bound(self, rig):
        # frozen Monte-Carlo oracle: 1000 trials at +-1 px noise on this rig
        # give mean 3D error ~3.5 mm and max ~8.5 mm; bounds add 50% headroom
        rng = np.random.default_rng(2)
        errors = []
        for _ in range(1000):
            point = rng.uniform([-500, -500, 200], [500, 500, 1800])
            obs = [(cam, project(point, cam) + rng.normal(0, 1.0, 2))
                   for cam in rig.cameras]
            rec, residual = triangulate(obs, rig)
            assert residual > 0.0
            errors.append(np.linalg.norm(rec - point))
        errors = np.array(errors)
        assert errors.mean() < 5.5
        assert errors.max() < 13.0


def _views_with_visibility(pose, rig, visible_sets):
    """visible_sets: keypoint index -> set of camera ids that see it."""
    views = {}
    for cam in rig.cameras:
        uv = project(pose.coords, cam)
        vis = np.zeros(133, dtype=bool)
        for k in range(133):
            vis[k] = cam.cam_id in visible_sets.get(k, set(rig.camera_ids))
        views[cam.cam_id] = Pose2D(uv, vis)
    return views


class TestTriangulatePose:
    def test_fully_visible_pose_complete(self, clean_detections, rig):
        pose, views = clean_detections
        tri = triangulate_pose(views, rig)
        assert all(s is KeypointStatus.TRIANGULATED for s in tri.statuses)
        assert classify_pose(tri.statuses) is PoseClass.COMPLETE
        assert np.abs(tri.coords - pose.coords).max() < 1e-6

    def test_opposing_only_keypoint(self, generator, rig):
        pose = generator.generate(11)
        views = _views_with_visibility(pose, rig, {0: {"c1", "c3"}})
        tri = triangulate_pose(views, rig)
        assert tri.statuses[0] is KeypointStatus.OPPOSING_ONLY
        assert not tri.triangulated[0]
        assert np.isnan(tri.coords[0]).all()
        assert classify_pose(tri.statuses) is PoseClass.INCOMPLETE

    def test_seen_once_keypoint(self, generator, rig):
        pose = generator.generate(12)
        views = _views_with_visibility(pose, rig, {5: {"c2"}})
        tri = triangulate_pose(views, rig)
        assert tri.statuses[5] is KeypointStatus.SEEN_ONCE

    def test_unseen_keypoint_rejects_pose(self, generator, rig):
        pose = generator.generate(13)
        views = _views_with_visibility(pose, rig, {40: set()})
        tri = triangulate_pose(views, rig)
        assert tri.statuses[40] is KeypointStatus.UNSEEN
        assert classify_pose(tri.statuses) is PoseClass.REJECTED

    def test_two_view_mode(self, clean_detections, rig):
        pose, views = clean_detections
        tri = triangulate_pose(views, rig, use_all_views=False)
        assert np.abs(tri.coords - pose.coords).max() < 1e-6

    def test_exhaustive_visibility_patterns(self, generator, rig):
        """Brute-force oracle over all 16 patterns of 4-view visibility."""
        pose = generator.generate(14)
        ids = rig.camera_ids
        for bits in itertools.product([False, True], repeat=4):
            seen = {cid for cid, b in zip(ids, bits) if b}
            views = _views_with_visibility(pose, rig, {0: seen})
            status = triangulate_pose(views, rig).statuses[0]
            pairs = [(a, b) for a in seen for b in seen if a < b]
            expect_triangulated = any(not rig.is_opposing(a, b) for a, b in pairs)
            if expect_triangulated:
                assert status is KeypointStatus.TRIANGULATED
            elif len(seen) == 0:
                assert status is KeypointStatus.UNSEEN
            elif len(seen) == 1:
                assert status is KeypointStatus.SEEN_ONCE
            else:
                assert status is KeypointStatus.OPPOSING_ONLY


class TestClassify:
    def test_all_triangulated_complete(self):
        statuses = [KeypointStatus.TRIANGULATED] * 133
        assert classify_pose(statuses) is PoseClass.COMPLETE

    def test_some_seen_once_incomplete(self):
        statuses = [KeypointStatus.TRIANGULATED] * 123 \
            + [KeypointStatus.SEEN_ONCE] * 10
        assert classify_pose(statuses) is PoseClass.INCOMPLETE

    def test_one_unseen_rejected(self):
        statuses = [KeypointStatus.TRIANGULATED] * 132 + [KeypointStatus.UNSEEN]
        assert classify_pose(statuses) is PoseClass.REJECTED


class TestSelectViews:
    def _rig_ids(self, rig):
        return rig.camera_ids

    def _projections(self, variances, rng_seed=0):
        rng = np.random.default_rng(rng_seed)
        out = {}
        for cid, var in variances.items():
            pts = rng.standard_normal((400, 2))
            pts = (pts - pts.mean(axis=0)) / pts.std(axis=0)
            out[cid] = pts * np.sqrt(var / 2.0)
        return out

    def test_spec_example_highest_min(self, rig):
        proj = self._projections({"c1": 9.0, "c2": 1.0, "c3": 8.0, "c4": 2.0})
        assert select_views(proj, rig) == ("c1", "c4")

    def test_collapsed_view_avoided(self, rig):
        proj = self._projections({"c1": 4.0, "c2": 4.0, "c3": 4.0})
        proj["c4"] = np.zeros((400, 2))  # zero variance
        pair = select_views(proj, rig)
        assert "c4" not in pair

    def test_tie_break_lowest_pair(self, rig):
        pts = np.random.default_rng(5).standard_normal((100, 2))
        proj = {cid: pts for cid in self._rig_ids(rig)}
        # all views identical variance: the smallest non-opposing pair wins
        assert select_views(proj, rig) == ("c1", "c2")

    def test_mean_aggregate_mode(self, rig):
        proj = self._projections({"c1": 9.0, "c2": 1.0, "c3": 8.0, "c4": 2.0})
        # mean scores: (c1,c2)=5, (c1,c4)=5.5, (c2,c3)=4.5, (c3,c4)=5
        assert select_views(proj, rig, aggregate="mean") == ("c1", "c4")

    def test_never_returns_opposing(self, rig):
        rng = np.random.default_rng(3)
        for seed in range(10):
            proj = {cid: rng.standard_normal((50, 2)) * rng.uniform(1, 5)
                    for cid in self._rig_ids(rig)}
            assert not rig.is_opposing(*select_views(proj, rig))


class TestRigIO:
    def test_rig_round_trip(self, rig, tmp_path):
        path = tmp_path / "rig.json"
        rig.save(path)
        loaded = Rig.load(path)
        assert loaded.camera_ids == rig.camera_ids
        assert loaded.opposing_pairs == rig.opposing_pairs
        for a, b in zip(loaded.cameras, rig.cameras):
            assert np.allclose(a.intrinsics, b.intrinsics)
            assert np.allclose(a.rotation, b.rotation)
            assert np.allclose(a.translation, b.translation)

    def test_rig_requires_four_cameras(self, rig):
        with pytest.raises(ValueError, match="4 cameras"):
            Rig(rig.cameras[:3], frozenset())
