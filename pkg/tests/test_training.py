import math
import statistics

import numpy as np
import pytest
import torch

from vidmil.data import LabelSet, SyntheticDatasetConfig, VideoBag, carve_validation, generate_dataset
from vidmil.errors import ContractViolation, TrainingDivergedError
from vidmil.model import ModelConfig
import vidmil.training as training
from vidmil.training import (Checkpoint, FeaturePipeline, TrainingConfig, augment, evaluate_loss, flip,
                             predict_records, subsample_indices, subsample_uniform, total_loss, train,
                             video_loss, zoom)

SMALL_MODEL = ModelConfig(variant="PS-DeVCEM", hidden_dim=4, num_layers=1, attention_dim=4)


def small_config(**kw):
    base = dict(epochs=3, batch_size=4, lr_min=1e-3, lr_max=1e-2, augment=False, lr_cycle_epochs=2)
    return TrainingConfig(**{**base, **kw})


class TestLosses:
    def test_half_predictions(self):
        pred = torch.full((4,), 0.5, dtype=torch.float64)
        assert math.isclose(video_loss(pred, LabelSet(frozenset({1}), 4)).item(), math.log(2), rel_tol=1e-12)

    def test_perfect_prediction(self):
        gt = LabelSet(frozenset({0, 2}), 3)
        assert video_loss(torch.tensor(gt.multi_hot()), gt).item() <= 2e-7 * 3

    def test_hand_value(self):
        loss = video_loss(torch.tensor([0.9, 0.2], dtype=torch.float64), LabelSet(frozenset({0}), 2))
        assert math.isclose(loss.item(), -(math.log(0.9) + math.log(0.8)) / 2, rel_tol=1e-12)

    def test_lambda_zero_is_exact(self):
        pred = torch.tensor([0.3, 0.8], dtype=torch.float64)
        gt = LabelSet(frozenset({1}), 2)
        out = total_loss(pred, gt, torch.tensor(5.0, dtype=torch.float64), lam=0.0)
        assert out.item() == video_loss(pred, gt).item()

    def test_lambda_one_sums(self):
        pred = torch.full((3,), 0.5, dtype=torch.float64)
        ss = torch.tensor(math.log(2), dtype=torch.float64)
        out = total_loss(pred, LabelSet(frozenset(), 3), ss, lam=1.0)
        assert math.isclose(out.item(), 2 * math.log(2), rel_tol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            video_loss(torch.full((3,), 0.5), LabelSet(frozenset(), 4))


class TestSubsample:
    def test_identity(self):
        assert subsample_indices(30).tolist() == list(range(30))

    def test_sixty_frames_golden(self):
        assert subsample_indices(60).tolist() == list(range(0, 60, 2))

    def test_thirty_one_frames(self):
        idx = subsample_indices(31)
        assert len(idx) == 30 and idx[0] == 0 and idx[-1] == 30 and np.all(np.diff(idx) > 0)

    @pytest.mark.parametrize("n", [31, 45, 61, 100, 1000])
    def test_strictly_increasing_in_range(self, n):
        idx = subsample_indices(n)
        assert len(idx) == 30 and np.all(np.diff(idx) > 0) and idx[0] == 0 and idx[-1] < n

    def test_bag_subsampling_keeps_labels(self):
        cfg = SyntheticDatasetConfig(num_videos=3, frames_per_video=60, seed=0)
        for bag in generate_dataset(cfg):
            short = subsample_uniform(bag)
            assert short.num_frames == 30
            assert np.array_equal(short.features, bag.features[::2])
            assert short.frame_labels == bag.frame_labels[::2]


class TestAugment:
    def frames(self):
        return np.random.default_rng(0).random((3, 10, 10, 3))

    @pytest.mark.parametrize("axis", ["h", "v"])
    def test_flip_involution(self, axis):
        f = self.frames()
        assert np.array_equal(flip(flip(f, axis), axis), f)

    def test_flip_horizontal_reverses_columns(self):
        f = self.frames()
        assert np.array_equal(flip(f, "h")[:, :, 0], f[:, :, -1])

    def test_zoom_identity(self):
        f = self.frames()
        assert np.abs(zoom(f, 1.0) - f).max() < 1e-6

    def test_zoom_stays_in_range(self):
        out = zoom(self.frames(), 0.8)
        assert out.shape == (3, 10, 10, 3) and out.min() >= 0 and out.max() <= 1

    def test_seeded(self):
        bag = VideoBag("a", LabelSet(frozenset(), 2), frames=self.frames())
        a = augment(bag, np.random.default_rng(9)).frames
        b = augment(bag, np.random.default_rng(9)).frames
        assert np.array_equal(a, b)

    def test_feature_bags_warn(self):
        bag = VideoBag("a", LabelSet(frozenset(), 2), features=np.zeros((3, 2)))
        with pytest.warns(UserWarning):
            assert augment(bag, np.random.default_rng(0)) is bag


class TestTrain:
    def split(self, bags):
        return carve_validation(bags, 0.2, seed=0)

    def test_zero_epochs_returns_initialisation(self, tiny_bags):
        tr, va = self.split(tiny_bags)
        ckpt = train(small_config(epochs=0, seed=5), "PS-DeVCEM", tr, va, SMALL_MODEL)
        assert ckpt.epoch == 0 and len(ckpt.history) == 1
        torch.manual_seed(5)
        fresh = training.build_model(SMALL_MODEL, 8, 3)
        for k, v in fresh.state_dict().items():
            assert np.array_equal(ckpt.params[k], v.numpy())

    def test_loss_decreases(self):
        deltas = []
        for seed in range(3):
            bags = generate_dataset(SyntheticDatasetConfig(num_videos=12, num_classes=3, feature_dim=8,
                                                           frames_per_video=10, seed=seed))
            tr, va = bags[:10], bags[10:]
            cfg = small_config(epochs=20, seed=seed, batch_size=2)
            log = []
            train(cfg, "PS-DeVCEM", tr, va, SMALL_MODEL, log=log.append)
            deltas.append(log[20]["train_loss"] - log[0]["train_loss"])
        assert statistics.median(deltas) < 0

    def test_deterministic(self, tiny_bags):
        tr, va = self.split(tiny_bags)
        a = train(small_config(seed=2), "GuidedLSTM", tr, va, SMALL_MODEL)
        b = train(small_config(seed=2), "GuidedLSTM", tr, va, SMALL_MODEL)
        assert a.val_loss == b.val_loss and a.history == b.history
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_checkpoint_round_trip(self, tiny_bags, tmp_path):
        tr, va = self.split(tiny_bags)
        cfg = small_config(seed=1)
        ckpt = train(cfg, "PS-DeVCEM", tr, va, SMALL_MODEL)
        ckpt.save(tmp_path / "c.npz")
        loaded = Checkpoint.load(tmp_path / "c.npz")
        assert loaded.epoch == ckpt.epoch and loaded.history == ckpt.history
        assert loaded.val_loss == ckpt.val_loss
        model = loaded.build_model()
        assert evaluate_loss(model, FeaturePipeline(cfg), va) == ckpt.val_loss
        ckpt.save(tmp_path / "d.npz")
        assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()

    def test_best_epoch_has_lowest_validation_loss(self, tiny_bags):
        tr, va = self.split(tiny_bags)
        ckpt = train(small_config(epochs=6), "AttenLSTM", tr, va, SMALL_MODEL)
        best = min(h["val_loss"] for h in ckpt.history)
        assert ckpt.val_loss == best == ckpt.history[ckpt.epoch]["val_loss"]

    def test_patience_stops_early(self, tiny_bags):
        tr, va = self.split(tiny_bags)
        log = []
        # a zero learning-rate wiggle never improves on epoch 0
        cfg = small_config(epochs=50, patience=2, lr_min=1e-12, lr_max=1e-12)
        train(cfg, "AttenLSTM", tr, va, SMALL_MODEL, log=log.append)
        assert len(log) < 51

    def test_divergence_raises(self, tiny_bags, monkeypatch):
        tr, va = self.split(tiny_bags)
        real = training.batch_losses

        def poisoned(*args, **kw):
            tot, vid, ss = real(*args, **kw)
            return tot * float("nan"), vid, ss

        monkeypatch.setattr(training, "batch_losses", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            train(small_config(), "PS-DeVCEM", tr, va, SMALL_MODEL)
        assert err.value.epoch == 1

    def test_empty_split_rejected(self, tiny_bags):
        with pytest.raises(ContractViolation):
            train(small_config(), "AttenLSTM", tiny_bags, [], SMALL_MODEL)

    def test_pixel_bags_with_extractor(self):
        from vidmil.backbone import SyntheticProjector

        bags = generate_dataset(SyntheticDatasetConfig(num_videos=10, num_classes=2, frames_per_video=6,
                                                       modality="pixels", image_size=8, seed=0))
        cfg = small_config(epochs=2, augment=True)
        model_cfg = ModelConfig(variant="AttenLSTM", hidden_dim=4, num_layers=1, attention_dim=4)
        ckpt = train(cfg, "AttenLSTM", bags[:8], bags[8:], model_cfg, extractor=SyntheticProjector(output_dim=6))
        records = predict_records(ckpt.build_model(), bags[8:], cfg, SyntheticProjector(output_dim=6))
        assert len(records) == 2 and records[0].alpha.shape == (6,)

    def test_predict_records(self, tiny_bags):
        tr, va = self.split(tiny_bags)
        ckpt = train(small_config(epochs=1), "PS-DeVCEM", tr, va, SMALL_MODEL)
        recs = predict_records(ckpt.build_model(), va)
        for r, bag in zip(recs, va):
            assert r.video_id == bag.id and abs(r.alpha.sum() - 1) < 1e-6
            assert r.frame_labels == bag.frame_labels and len(r.positive_indices) >= 1
            assert r.predicted == LabelSet.from_multi_hot(r.probabilities, 0.5)
