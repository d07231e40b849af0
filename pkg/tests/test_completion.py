import numpy as np
import pytest
import torch
from scipy import stats as scipy_stats

from poseforge.completion import (
    CompletionCorpus,
    CompletionLossConfig,
    CompletionNet,
    CompletionNetConfig,
    TrainSchedule,
    ViewObservations,
    complete_pose,
    completion_loss,
    default_curriculum,
    encode_coordinates,
    load_checkpoint,
    mask_blocks,
    masked_mpjpe,
    mean_pose_predictor,
    sample_training_mask,
    sample_training_masks,
    save_checkpoint,
    sincos_frequencies,
    train_completion,
)
from poseforge.skeleton import center_on
from poseforge.training_data import pelvis_centered_corpus


def tiny_config(num_keypoints=5, d=8):
    sets = tuple(tuple(range(1, k + 1))
                 for k in (2, 3, 4, num_keypoints))
    return CompletionNetConfig(num_keypoints=num_keypoints, model_dim=d,
                               dim_feedforward=16, curriculum_sets=sets,
                               scale_mm=100.0, canonicalize_pairs=())


@pytest.fixture(scope="module")
def net(layout):
    torch.manual_seed(0)
    return CompletionNet(CompletionNetConfig(
        curriculum_sets=default_curriculum(layout)))


class TestEncoding:
    def test_zero_coordinate(self):
        feats = encode_coordinates(np.zeros((4, 3)), sincos_frequencies(8))
        assert feats.shape == (4, 48)
        assert np.all(feats[:, 0::2] == 0.0)  # sines
        assert np.all(feats[:, 1::2] == 1.0)  # cosines

    def test_feature_count_is_48(self):
        feats = encode_coordinates(np.ones((133, 3)), sincos_frequencies(8))
        assert feats.shape == (133, 48)

    def test_unit_frequency_value(self):
        feats = encode_coordinates(np.array([[1.0, 0.0, 0.0]]), np.array([1.0]))
        assert feats[0, 0] == pytest.approx(0.84147098, abs=1e-6)
        assert feats[0, 1] == pytest.approx(0.54030231, abs=1e-6)

    def test_frequency_ladder(self):
        freqs = sincos_frequencies(8, scale=1500.0)
        assert len(freqs) == 8
        assert freqs[0] == pytest.approx(np.pi / 1500.0)
        assert np.allclose(freqs[1:] / freqs[:-1], 2.0)


class TestMaskSampling:
    def test_determinism(self, layout):
        a = sample_training_mask(layout, seed=3)
        b = sample_training_mask(layout, seed=3)
        assert np.array_equal(a, b)

    def test_never_fully_masked(self, layout):
        masks = sample_training_masks(layout, 5000, seed=1)
        assert not masks.all(axis=1).any()

    def test_block_masks_are_exact_blocks(self, layout):
        blocks = [set(b) for b in mask_blocks(layout)]
        masks = sample_training_masks(layout, 3000, seed=2)
        for m in masks:
            idx = set(np.where(m)[0])
            if idx in blocks:
                continue
            # keypoint-wise branch: no full block forced
            assert len(idx) < 133

    def test_branch_probability(self, layout):
        # the block branch produces exactly one of 5 known index sets
        blocks = [frozenset(b) for b in mask_blocks(layout)]
        masks = sample_training_masks(layout, 50_000, seed=4)
        as_sets = [frozenset(np.where(m)[0]) for m in masks]
        block_hits = sum(s in blocks for s in as_sets)
        # keypoint-wise draws collide with a block with negligible probability
        assert block_hits / 50_000 == pytest.approx(0.5, abs=0.01)

    def test_hand_marginal_rate(self, layout):
        masks = sample_training_masks(layout, 100_000, seed=5)
        hand = masks[:, layout.part_indices("left_hand")]
        assert hand.mean() == pytest.approx(0.175, abs=0.005)

    def test_marginals_chi_squared(self, layout):
        """Observed per-keypoint mask counts match analytic marginals at the
        1% significance level."""
        n = 100_000
        masks = sample_training_masks(layout, n, seed=6)
        lf, rf = layout.face_halves()
        midline = np.array(sorted(set(lf) & set(rf)))
        expected = np.full(133, 0.5 * 0.15 + 0.5 * 0.2)
        expected[midline] = 0.5 * 0.15 + 0.5 * 0.4
        observed = masks.sum(axis=0)
        # binomial per keypoint -> z^2 test statistic summed over keypoints
        var = n * expected * (1 - expected)
        chi2 = float((((observed - n * expected) ** 2) / var).sum())
        p = 1.0 - scipy_stats.chi2.cdf(chi2, df=133)
        assert p > 0.01


class TestForward:
    def test_output_shapes(self, net):
        x = torch.randn(3, 133, 3) * 100
        outs = net(x, torch.zeros(3, 133, dtype=torch.bool))
        assert len(outs) == 4
        assert all(o.shape == (3, 133, 3) for o in outs)

    def test_empty_mask_passthrough_exact(self, net):
        x = torch.randn(2, 133, 3) * 100
        outs = net(x, torch.zeros(2, 133, dtype=torch.bool))
        for o in outs:
            assert torch.equal(o, x)

    def test_unmasked_positions_pass_through(self, net):
        x = torch.randn(2, 133, 3) * 100
        m = torch.zeros(2, 133, dtype=torch.bool)
        m[:, 91:112] = True
        outs = net(x, m)
        assert torch.equal(outs[-1][~m], x[~m])
        assert not torch.equal(outs[-1][m], x[m])

    def test_seeded_build_is_deterministic(self, layout):
        cfg = CompletionNetConfig(curriculum_sets=default_curriculum(layout))
        torch.manual_seed(11)
        a = CompletionNet(cfg)
        torch.manual_seed(11)
        b = CompletionNet(cfg)
        x = torch.full((1, 133, 3), 25.0)
        m = torch.zeros(1, 133, dtype=torch.bool)
        m[:, :10] = True
        assert torch.equal(a(x, m)[-1], b(x, m)[-1])

    def test_fully_masked_pose_rejected(self, net):
        x = torch.zeros(1, 133, 3)
        with pytest.raises(ValueError, match="every keypoint masked"):
            net(x, torch.ones(1, 133, dtype=torch.bool))

    def test_curriculum_sets_nested_validation(self):
        with pytest.raises(ValueError, match="nested"):
            CompletionNetConfig(num_keypoints=5, curriculum_sets=(
                (1, 2), (1, 2), (1, 2, 3), (1, 2, 3, 4, 5)))
        with pytest.raises(ValueError, match="cover"):
            CompletionNetConfig(num_keypoints=5, curriculum_sets=(
                (1,), (1, 2), (1, 2, 3), (1, 2, 3, 4)))


class TestLoss:
    def _setup(self):
        torch.manual_seed(1)
        cfg = tiny_config()
        net = CompletionNet(cfg)
        target = torch.randn(2, 5, 3, dtype=torch.float64) * 50
        mask = torch.zeros(2, 5, dtype=torch.bool)
        mask[:, 2] = True
        return net, target, mask

    def test_perfect_prediction_zero_loss(self):
        net, target, mask = self._setup()
        outs = [target.clone() for _ in range(4)]
        sym = [((0, 1), (3, 4))]
        # make the pose symmetric so the symmetry term is exactly zero
        t = torch.zeros(2, 5, 3, dtype=torch.float64)
        t[:, 0] = torch.tensor([1.0, 0, 0])
        t[:, 3] = torch.tensor([-1.0, 0, 0])
        outs = [t.clone() for _ in range(4)]
        res = completion_loss(outs, t, mask, [np.arange(5)] * 4,
                              CompletionLossConfig(), sym_bone_pairs=sym)
        assert float(res["loss"]) == 0.0

    def test_zero_weights_give_pure_l3d(self):
        net, target, mask = self._setup()
        pred = target + 1.0
        outs = [pred.clone() for _ in range(4)]
        res = completion_loss(outs, target, mask, net.curriculum,
                              CompletionLossConfig(alpha=0.0, beta=0.0),
                              sym_bone_pairs=[((0, 1), (3, 4))])
        assert float(res["loss"]) == pytest.approx(sum(res["components"]["l3d"]))

    def test_single_keypoint_l1_is_seven(self):
        target = torch.zeros(1, 5, 3, dtype=torch.float64)
        pred = target.clone()
        pred[0, 2] = torch.tensor([3.0, 4.0, 0.0])
        mask = torch.zeros(1, 5, dtype=torch.bool)
        mask[0, 2] = True
        res = completion_loss([pred], target, mask, [np.arange(5)],
                              CompletionLossConfig(alpha=0.0, beta=0.0))
        assert float(res["loss"]) == pytest.approx(7.0)

    def test_block_without_supervised_keypoints_contributes_zero(self):
        target = torch.zeros(1, 5, 3, dtype=torch.float64)
        pred = target + 5.0
        mask = torch.zeros(1, 5, dtype=torch.bool)
        mask[0, 4] = True  # outside the first block {0, 1}
        res = completion_loss([pred, pred], target, mask,
                              [np.arange(2), np.arange(5)],
                              CompletionLossConfig(alpha=0.0, beta=0.0))
        assert res["components"]["l3d"][0] == 0.0
        assert res["components"]["l3d"][1] > 0.0

    def test_gradients_match_finite_differences(self, layout):
        """Central finite differences on a seeded parameter subset."""
        torch.manual_seed(2)
        cfg = tiny_config()
        net = CompletionNet(cfg).double()
        coords = torch.randn(2, 5, 3, dtype=torch.float64) * 40
        target = coords + torch.randn(2, 5, 3, dtype=torch.float64) * 5
        mask = torch.zeros(2, 5, dtype=torch.bool)
        mask[:, 1] = True
        mask[0, 3] = True
        sym = [((0, 1), (3, 4))]

        def loss_value():
            outs = net(coords, mask)
            return completion_loss(outs, target, mask, net.curriculum,
                                   CompletionLossConfig(alpha=0.0, beta=0.5),
                                   sym_bone_pairs=sym)["loss"]

        loss = loss_value()
        net.zero_grad()
        loss.backward()
        rng = np.random.default_rng(0)
        params = [p for p in net.parameters() if p.requires_grad]
        checked = 0
        eps = 1e-6
        for p in params:
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(4, flat.numel()),
                                  replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                up = float(loss_value())
                flat[idx] = orig - eps
                down = float(loss_value())
                flat[idx] = orig
                fd = (up - down) / (2 * eps)
                g = float(grad[idx])
                assert abs(fd - g) <= 1e-4 * max(1.0, abs(fd), abs(g)), \
                    f"param grad mismatch: autograd {g} vs fd {fd}"
                checked += 1
        assert checked >= 40


@pytest.fixture(scope="module")
def smoke_model(generator, layout):
    """A briefly trained small-corpus model shared by the smoke tests."""
    corpus = CompletionCorpus(pelvis_centered_corpus(generator, layout, 400))
    schedule = TrainSchedule(epochs=12, batch_size=48, seed=0)
    model, history = train_completion(
        corpus, layout, loss_config=CompletionLossConfig(alpha=0.0, beta=0.01),
        schedule=schedule)
    return corpus, model, history


class TestTraining:
    def test_loss_decreases(self, smoke_model):
        _, _, history = smoke_model
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_checkpoint_round_trip_bit_identical(self, smoke_model, tmp_path):
        corpus, model, _ = smoke_model
        path = tmp_path / "completion.pt"
        save_checkpoint(model, path, seed=0)
        loaded = load_checkpoint(path)
        x = torch.as_tensor(corpus.poses[:4], dtype=torch.float32)
        m = torch.zeros(4, 133, dtype=torch.bool)
        m[:, 30:60] = True
        with torch.no_grad():
            a = model(x, m)[-1]
            b = loaded(x, m)[-1]
        assert torch.equal(a, b)

    def test_divergence_aborts_with_diagnostics(self, generator, layout):
        corpus = CompletionCorpus(pelvis_centered_corpus(generator, layout, 60))
        with pytest.raises(RuntimeError, match="diverged"):
            train_completion(corpus, layout,
                             schedule=TrainSchedule(epochs=2, lr=1e6, seed=0))

    def test_symmetry_ablation_changes_lsym(self, generator, layout):
        from poseforge.skeleton import symmetric_length_error

        corpus = CompletionCorpus(pelvis_centered_corpus(generator, layout, 120))
        masks = sample_training_masks(layout, 20, seed=9)
        results = {}
        for beta in (0.0, 5.0):
            model, _ = train_completion(
                corpus, layout,
                loss_config=CompletionLossConfig(alpha=0.0, beta=beta),
                schedule=TrainSchedule(epochs=3, batch_size=48, seed=0))
            total = 0.0
            for pose, m in zip(corpus.poses[:20], masks):
                done, _ = complete_pose(model, pose, ~m)
                total += symmetric_length_error(done, layout)
            results[beta] = total
        assert results[0.0] != results[5.0]


class TestComplete:
    def test_complete_input_unchanged(self, smoke_model):
        corpus, model, _ = smoke_model
        pose, completed = complete_pose(model, corpus.poses[0],
                                        np.ones(133, dtype=bool))
        assert np.array_equal(pose.coords, corpus.poses[0])
        assert not completed.any()

    def test_masked_hand_fully_predicted(self, smoke_model, layout):
        corpus, model, _ = smoke_model
        known = np.ones(133, dtype=bool)
        known[layout.part_indices("left_hand")] = False
        source = corpus.poses[1]
        pose, completed = complete_pose(model, source, known)
        assert completed.sum() == 21
        assert np.array_equal(pose.coords[known], source[known])
        assert not np.array_equal(pose.coords[~known], source[~known])

    def test_nan_at_missing_positions_accepted(self, smoke_model, layout):
        corpus, model, _ = smoke_model
        coords = corpus.poses[2].copy()
        known = np.ones(133, dtype=bool)
        known[50:70] = False
        coords[~known] = np.nan
        pose, _ = complete_pose(model, coords, known)
        assert np.isfinite(pose.coords).all()

    def test_beats_mean_pose_oracle_on_smoke_corpus(self, smoke_model, layout,
                                                    generator):
        corpus, model, _ = smoke_model
        test = pelvis_centered_corpus(generator, layout, 40, seed_base=90_000)
        masks = sample_training_masks(layout, 40, seed=77)
        err = masked_mpjpe(model, test, masks)
        mean_pose = mean_pose_predictor(corpus.poses)
        oracle = np.linalg.norm(mean_pose[None] - test, axis=-1)[masks].mean()
        assert err < oracle  # the full margin check runs in the acceptance suite
