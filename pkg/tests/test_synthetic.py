import numpy as np
import pytest

from poseforge.cameras import classify_pose, project, triangulate_pose, PoseClass
from poseforge.skeleton import symmetric_length_error
from poseforge.synthetic import (
    HeatmapRender,
    OcclusionConfig,
    PoseGeneratorConfig,
    SyntheticPoseGenerator,
    default_rig,
    render_heatmaps,
    simulate_detections,
    template_pose,
)


class TestGenerator:
    def test_zero_articulation_gives_template(self, still_generator):
        pose = still_generator.generate(123)
        assert np.array_equal(pose.coords, template_pose().coords)

    def test_seed_determinism(self, generator):
        a = generator.generate(99)
        b = generator.generate(99)
        assert np.array_equal(a.coords, b.coords)

    def test_different_seeds_differ(self, generator):
        assert not np.array_equal(generator.generate(1).coords,
                                  generator.generate(2).coords)

    def test_symmetric_bone_lengths_by_construction(self, generator, layout):
        worst = max(symmetric_length_error(generator.generate(s), layout)
                    for s in range(200))
        assert worst < 1e-9

    def test_hip_separation_in_range(self, generator, layout):
        h1, h2 = layout.hip_indices
        for seed in range(50):
            c = generator.generate(seed).coords
            d = np.linalg.norm(c[h1 - 1] - c[h2 - 1])
            assert 200.0 <= d <= 400.0

    def test_poses_vary_within_translation_bounds(self, layout):
        cfg = PoseGeneratorConfig(translation=(300.0, 300.0, 150.0))
        gen = SyntheticPoseGenerator(layout, cfg)
        pelvises = []
        for seed in range(100):
            c = gen.generate(seed).coords
            pelvises.append(0.5 * (c[11] + c[12]))
        pelvises = np.array(pelvises)
        assert np.all(np.abs(pelvises[:, 0]) <= 300.0 + 1e-9)
        assert np.all(np.abs(pelvises[:, 2] - 1000.0) <= 150.0 + 1e-9)


class TestSimulateDetections:
    def test_noise_free_projections_exact(self, clean_detections, rig):
        pose, views = clean_detections
        for cam in rig.cameras:
            det = views[cam.cam_id]
            assert det.visibility.all()
            assert np.allclose(det.coords, project(pose.coords, cam))

    def test_forced_hand_drop_single_view(self, generator, rig, layout):
        pose = generator.generate(21)
        cfg = OcclusionConfig(noise_sigma_px=0.0, keypoint_drop_prob=0.0,
                              face_half_drop_prob=0.0,
                              hand_drop_prob={"c2": 1.0})
        views = simulate_detections(pose, rig, layout, cfg, seed=5)
        hands = np.concatenate([layout.part_indices("left_hand"),
                                layout.part_indices("right_hand")])
        assert not views["c2"].visibility[hands].any()
        for cid in ("c1", "c3", "c4"):
            assert views[cid].visibility[hands].all()

    def test_determinism(self, generator, rig, layout):
        pose = generator.generate(22)
        cfg = OcclusionConfig()
        a = simulate_detections(pose, rig, layout, cfg, seed=9)
        b = simulate_detections(pose, rig, layout, cfg, seed=9)
        for cid in a:
            assert np.array_equal(a[cid].coords, b[cid].coords)
            assert np.array_equal(a[cid].visibility, b[cid].visibility)

    def test_confidence_tracks_visibility(self, generator, rig, layout):
        pose = generator.generate(23)
        views = simulate_detections(pose, rig, layout, OcclusionConfig(), seed=2)
        for det in views.values():
            assert np.all(det.confidence[~det.visibility] == 0.0)
            assert np.all(det.confidence[det.visibility] >= 0.6)

    def test_classification_proportions(self, generator, rig, layout):
        """Empirical class frequencies under an aggressive occlusion model:
        all three classes occur; complete + incomplete are the retained set."""
        cfg = OcclusionConfig(noise_sigma_px=0.5, keypoint_drop_prob=0.01,
                              hand_drop_prob=0.4, face_half_drop_prob=0.1)
        counts = {c: 0 for c in PoseClass}
        n = 200
        for seed in range(n):
            pose = generator.generate(1000 + seed)
            views = simulate_detections(pose, rig, layout, cfg, seed=seed)
            tri = triangulate_pose(views, rig)
            counts[classify_pose(tri.statuses)] += 1
        assert counts[PoseClass.COMPLETE] > 0
        assert counts[PoseClass.INCOMPLETE] > 0
        assert counts[PoseClass.REJECTED] > 0
        retained = counts[PoseClass.COMPLETE] + counts[PoseClass.INCOMPLETE]
        assert retained + counts[PoseClass.REJECTED] == n

    def test_noiseless_triangulation_round_trip(self, clean_detections, rig):
        pose, views = clean_detections
        tri = triangulate_pose(views, rig)
        assert np.abs(tri.coords - pose.coords).max() < 1e-6


class TestHeatmaps:
    def test_single_keypoint_peak(self):
        coords = np.array([[10.0, 10.0]])
        render = render_heatmaps(coords, np.array([True]), (32, 32), sigma_px=3.0)
        channel = render.channels[0]
        assert np.unravel_index(channel.argmax(), channel.shape) == (10, 10)
        assert channel.max() == pytest.approx(1.0)

    def test_no_visible_keypoints_all_zero(self):
        render = render_heatmaps(np.array([[10.0, 10.0]]), np.array([False]),
                                 (32, 32))
        assert not render.channels.any()

    def test_blob_values_match_pointwise_gaussian(self):
        coords = np.array([[12.0, 15.0], [13.0, 15.0]])  # 1 px apart
        sigma = 3.0
        render = render_heatmaps(coords, np.array([True, True]), (40, 40), sigma)
        composite = render.composite()
        ys, xs = np.mgrid[0:40, 0:40]
        expected = np.zeros((40, 40), dtype=np.float64)
        for (u, v) in coords:
            blob = np.exp(-((xs - u) ** 2 + (ys - v) ** 2) / (2 * sigma ** 2))
            blob[(np.abs(xs - u) > 9) | (np.abs(ys - v) > 9)] = 0.0
            expected = np.maximum(expected, blob)
        assert np.allclose(composite, expected, atol=1e-6)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError, match="sigma"):
            render_heatmaps(np.zeros((1, 2)), np.array([True]), (8, 8), 0.0)

    def test_determinism(self):
        coords = np.array([[5.0, 6.0]])
        a = render_heatmaps(coords, np.array([True]), (16, 16))
        b = render_heatmaps(coords, np.array([True]), (16, 16))
        assert np.array_equal(a.channels, b.channels)
