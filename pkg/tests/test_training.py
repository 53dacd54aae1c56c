import numpy as np
import pytest
import torch

from landmark_diffusion.checkpoint import load_checkpoint, save_checkpoint
from landmark_diffusion.data import generate_synthetic
from landmark_diffusion.diffusion import build_linear_schedule
from landmark_diffusion.network import NetworkConfig, build_network, convert_to_detector
from landmark_diffusion.training import (
    EmaTracker,
    FinetuneConfig,
    PlateauController,
    PretrainConfig,
    ema_update,
    evaluate_mre,
    finetune,
    predict_landmarks,
    pretrain,
    select_snapshot,
)

TOY = NetworkConfig(
    image_size=16,
    base_channels=8,
    channel_multipliers=(1, 2),
    res_blocks_per_level=1,
    attention_resolution=4,  # matches nothing: keep the toy net fast
    attention_heads=4,
)


def toy_net(seed=0, out_channels=1, conditioning=True):
    torch.manual_seed(seed)
    cfg = NetworkConfig(
        **{
            **TOY.__dict__,
            "out_channels": out_channels,
            "timestep_conditioning": conditioning,
        }
    )
    return build_network(cfg)


def toy_labeled(n, num_landmarks=2, seed=0, size=16):
    ds = generate_synthetic(n, (size, size), num_landmarks, seed=seed)
    return ds.labeled()


FAST_FT = FinetuneConfig(
    max_epochs=3,
    batch_size=2,
    grad_accumulation=2,
    initial_lr=1e-3,
    plateau_patience=2,
    early_stop_patience=4,
    heatmap_sigma=2.0,
    seed=0,
)


class TestEma:
    def test_single_update(self):
        tracker = EmaTracker({"w": torch.tensor([1.0])}, decay=0.995)
        ema_update(tracker, {"w": torch.tensor([0.0])})
        assert abs(tracker.shadow["w"].item() - 0.995) < 1e-6

    def test_geometric_closed_form(self):
        p, q, n = 3.0, 10.0, 200
        tracker = EmaTracker({"w": torch.tensor([q], dtype=torch.float64)}, decay=0.995)
        for _ in range(n):
            tracker.update({"w": torch.tensor([p], dtype=torch.float64)})
        expected = p + (q - p) * 0.995 ** n
        assert abs(tracker.shadow["w"].item() - expected) < 1e-10
        assert tracker.updates == n

    def test_zero_decay(self):
        tracker = EmaTracker({"w": torch.tensor([5.0])}, decay=0.0)
        tracker.update({"w": torch.tensor([-2.0])})
        assert tracker.shadow["w"].item() == -2.0

    def test_key_mismatch(self):
        tracker = EmaTracker({"w": torch.zeros(1)}, decay=0.9)
        with pytest.raises(ValueError, match="key"):
            tracker.update({"v": torch.zeros(1)})


class TestPlateauController:
    def test_non_increasing_sequence_never_reduces(self):
        c = PlateauController(1e-3, 0.5, patience=2, min_lr=1e-7, early_stop_patience=5)
        for loss in [1.0, 0.9, 0.9, 0.8, 0.8, 0.8, 0.7]:
            lr, stop, _ = c.observe(loss)
            assert lr == 1e-3
            assert not stop

    def test_plateau_reduces_lr(self):
        c = PlateauController(1e-3, 0.5, patience=2, min_lr=1e-7, early_stop_patience=10)
        c.observe(1.0)
        c.observe(1.1)
        lr, _, _ = c.observe(1.2)
        assert lr == 5e-4

    def test_early_stop_and_min_lr(self):
        c = PlateauController(1e-6, 0.1, patience=1, min_lr=1e-7, early_stop_patience=3)
        c.observe(1.0)
        stops = [c.observe(2.0)[1] for _ in range(3)]
        assert stops == [False, False, True]
        assert c.lr == 1e-7


class TestPretrain:
    def quick_cfg(self, **kw):
        base = dict(
            total_iterations=20,
            snapshot_iterations=(10, 20),
            batch_size=2,
            grad_accumulation=2,
            learning_rate=1e-3,
            num_diffusion_steps=10,
            seed=1,
            single_threaded=True,
        )
        base.update(kw)
        return PretrainConfig(**base)

    def sched(self):
        return build_linear_schedule(10, 1e-3, 0.1)

    def test_overfit_loss_decreases(self):
        images = [np.full((16, 16), 0.5, dtype=np.float32)]
        cfg = self.quick_cfg(total_iterations=200, snapshot_iterations=(200,))
        result = pretrain(toy_net(1), images, cfg, self.sched())
        assert np.mean(result.losses[-20:]) < result.losses[0]

    def test_snapshot_metadata(self):
        images = [im for im, _ in toy_labeled(3)]
        result = pretrain(toy_net(2), images, self.quick_cfg(), self.sched(), dataset_id="toy")
        assert [s.metadata["iteration"] for s in result.snapshots] == [10, 20]
        for snap in result.snapshots:
            assert snap.metadata["dataset_id"] == "toy"
            assert snap.ema_state is not None
            assert snap.schedule["num_steps"] == 10

    def test_seed_determinism(self):
        images = [im for im, _ in toy_labeled(3)]
        r1 = pretrain(toy_net(3), images, self.quick_cfg(), self.sched())
        r2 = pretrain(toy_net(3), images, self.quick_cfg(), self.sched())
        assert r1.losses == r2.losses
        for k in r1.snapshots[-1].state:
            assert torch.equal(r1.snapshots[-1].state[k], r2.snapshots[-1].state[k])

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pretrain(toy_net(), [], self.quick_cfg(), self.sched())

    def test_invalid_snapshot_iteration(self):
        with pytest.raises(ValueError, match="snapshot"):
            self.quick_cfg(snapshot_iterations=(50,)).validate()


class TestFinetune:
    def test_single_labeled_image_completes(self):
        det = convert_to_detector(toy_net(4), 2, generator=torch.Generator().manual_seed(0))
        train = toy_labeled(1, seed=1)
        val = toy_labeled(2, seed=2)
        result = finetune(det, train, val, FAST_FT)
        assert result.best_epoch >= 1
        assert np.isfinite(result.best_val_loss)
        assert len(result.log) <= FAST_FT.max_epochs

    def test_landmark_count_mismatch(self):
        det = convert_to_detector(toy_net(4), 3)
        with pytest.raises(ValueError, match="mismatch"):
            finetune(det, toy_labeled(1), toy_labeled(1), FAST_FT)

    def test_contour_nll_is_declared_hook(self):
        det = convert_to_detector(toy_net(4), 2)
        cfg = FinetuneConfig(loss_mode="contour_nll")
        with pytest.raises(NotImplementedError, match="contour"):
            finetune(det, toy_labeled(1), toy_labeled(1), cfg)

    def test_best_weights_not_from_later_epoch(self):
        det = convert_to_detector(toy_net(5), 2, generator=torch.Generator().manual_seed(0))
        result = finetune(det, toy_labeled(2, seed=3), toy_labeled(2, seed=4), FAST_FT)
        best = min(result.log, key=lambda e: e["val_loss"])
        assert result.best_epoch == best["epoch"]
        assert result.best_val_loss == best["val_loss"]

    def test_seed_determinism(self):
        train, val = toy_labeled(2, seed=5), toy_labeled(2, seed=6)
        results = []
        for _ in range(2):
            det = convert_to_detector(toy_net(6), 2, generator=torch.Generator().manual_seed(1))
            results.append(finetune(det, train, val, FAST_FT))
        assert results[0].best_val_loss == results[1].best_val_loss
        for k in results[0].best_state:
            assert torch.equal(results[0].best_state[k], results[1].best_state[k])

    def test_gradient_accumulation_equivalence(self):
        # (batch 2, accumulation 8) must match (batch 16, accumulation 1)
        train = toy_labeled(16, seed=7)
        val = toy_labeled(2, seed=8)
        outcomes = []
        for batch_size, accum in [(2, 8), (16, 1)]:
            cfg = FinetuneConfig(
                max_epochs=2,
                batch_size=batch_size,
                grad_accumulation=accum,
                initial_lr=1e-3,
                heatmap_sigma=2.0,
                seed=9,
            )
            det = convert_to_detector(toy_net(7), 2, generator=torch.Generator().manual_seed(2))
            outcomes.append(finetune(det, train, val, cfg))
        a, b = outcomes
        # exact up to float32 summation order
        assert abs(a.best_val_loss - b.best_val_loss) <= 1e-4 * abs(b.best_val_loss)
        for k in a.best_state:
            torch.testing.assert_close(a.best_state[k], b.best_state[k], rtol=1e-3, atol=1e-5)

    def test_beats_untrained_head(self):
        # fine-tuning on a handful of labels must beat the fresh head
        torch.set_num_threads(1)
        train = toy_labeled(10, seed=10, size=16)
        val = toy_labeled(4, seed=11, size=16)
        det = convert_to_detector(toy_net(8), 2, generator=torch.Generator().manual_seed(3))
        baseline = evaluate_mre(det, val)
        cfg = FinetuneConfig(
            max_epochs=30,
            batch_size=2,
            grad_accumulation=1,
            initial_lr=3e-3,
            plateau_patience=8,
            early_stop_patience=15,
            heatmap_sigma=2.0,
            seed=1,
        )
        result = finetune(det, train, val, cfg)
        det.load_state_dict(result.best_state)
        assert evaluate_mre(det, val) < baseline


class TestPredict:
    def test_prediction_shape_and_bounds(self):
        det = convert_to_detector(toy_net(9), 3)
        img = np.random.default_rng(0).uniform(size=(16, 16)).astype(np.float32)
        pred = predict_landmarks(det, img)
        assert len(pred) == 3
        assert pred.in_bounds.all()


class TestSelectSnapshot:
    def make_snapshots(self, iterations):
        images = [im for im, _ in toy_labeled(3, seed=12)]
        cfg = PretrainConfig(
            total_iterations=max(iterations),
            snapshot_iterations=tuple(iterations),
            batch_size=2,
            grad_accumulation=2,
            num_diffusion_steps=10,
            seed=2,
        )
        sched = build_linear_schedule(10, 1e-3, 0.1)
        return pretrain(toy_net(10), images, cfg, sched).snapshots

    def test_single_snapshot_returned(self):
        snaps = self.make_snapshots([4])
        train, val = toy_labeled(2, seed=13), toy_labeled(2, seed=14)
        sel = select_snapshot(snaps, train, val, FAST_FT)
        assert sel.winner is snaps[0]
        assert len(sel.scores) == 1

    def test_tie_breaks_to_fewer_iterations(self):
        snaps = self.make_snapshots([4, 8])
        # identical weights in both snapshots force identical fine-tunes
        snaps[1].state = {k: v.clone() for k, v in snaps[0].state.items()}
        snaps[1].ema_state = {k: v.clone() for k, v in snaps[0].ema_state.items()}
        train, val = toy_labeled(2, seed=15), toy_labeled(2, seed=16)
        sel = select_snapshot(snaps, train, val, FAST_FT, repetitions=2)
        assert sel.scores[0].mre_mean == sel.scores[1].mre_mean
        assert sel.winner.metadata["iteration"] == 4

    def test_scores_carry_mean_and_std(self):
        snaps = self.make_snapshots([4, 8])
        train, val = toy_labeled(2, seed=17), toy_labeled(2, seed=18)
        sel = select_snapshot(snaps, train, val, FAST_FT, repetitions=2)
        for score in sel.scores:
            assert len(score.mre_runs) == 2
            assert score.mre_std >= 0.0

    def test_empty_snapshot_list(self):
        with pytest.raises(ValueError, match="empty"):
            select_snapshot([], toy_labeled(1), toy_labeled(1), FAST_FT)


class TestCheckpointRoundtrip:
    def test_save_load_forward_bitwise(self, tmp_path):
        from landmark_diffusion.checkpoint import Checkpoint

        net = toy_net(11)
        ckpt = Checkpoint(
            config=net.config,
            state=net.state_dict(),
            ema_state=None,
            schedule={"num_steps": 10, "beta_start": 1e-3, "beta_end": 0.1},
            metadata={"iteration": 5, "mode": "denoiser"},
        )
        path = tmp_path / "ckpt.pt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        net2 = build_network(loaded.config)
        net2.load_state_dict(loaded.state)
        x = torch.randn(1, 1, 16, 16)
        t = torch.tensor([3])
        assert torch.equal(net(x, t), net2(x, t))
        assert loaded.metadata["iteration"] == 5

    def test_hash_mismatch_detected(self, tmp_path):
        from landmark_diffusion.checkpoint import Checkpoint

        net = toy_net(12)
        ckpt = Checkpoint(config=net.config, state=net.state_dict())
        path = tmp_path / "ckpt.pt"
        save_checkpoint(ckpt, path)
        payload = torch.load(path, weights_only=False)
        payload["config_hash"] = "0" * 64
        torch.save(payload, path)
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt")
