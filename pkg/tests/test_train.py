import dataclasses

import numpy as np
import pytest

from mfuse import checkpoint, train as tr
from mfuse.config import TrainConfig
from mfuse.imageio import write_image
from mfuse.model import MFNetConfig, init
from mfuse.tensor import Tensor
from mfuse.train import (SGD, Adam, ImagePair, PatchPair, lr_at, load_dataset, sample_patches,
                         train, train_step)


def small_cfg(tmp_path, **kw):
    base = dict(data_dir="unused", out_dir=str(tmp_path / "run"), patch_size=16, num_patches=200,
                iters_per_epoch=4, epochs=1, batch_size=2, checkpoint_every=2,
                model=MFNetConfig(channels=4, d1=1, d2=1, d3=2, seed=1), seed=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def pairs(rng):
    return [ImagePair(f"p{i}", *rng.random((2, 32, 40)).astype(np.float32)) for i in range(3)]


class TestDataset:
    def test_naming_and_order(self, tmp_path, rng):
        for name in ("b", "a"):
            for k in (1, 2):
                write_image(tmp_path / f"{name}_{k}.png", rng.random((9, 11)))
        write_image(tmp_path / "c_1.png", rng.random((9, 11)))  # no partner
        (tmp_path / "notes.txt").write_text("ignored")
        pairs = load_dataset(tmp_path)
        assert [p.name for p in pairs] == ["a", "b"]
        assert pairs[0].x1.shape == (9, 11)
        assert 0 <= pairs[0].x1.min() and pairs[0].x1.max() <= 1

    def test_size_mismatch_names_files(self, tmp_path, rng):
        write_image(tmp_path / "a_1.png", rng.random((9, 11)))
        write_image(tmp_path / "a_2.png", rng.random((10, 11)))
        with pytest.raises(ValueError, match=r"a_1\.png.*a_2\.png"):
            load_dataset(tmp_path)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ValueError, match="no"):
            load_dataset(tmp_path)

    def test_color_reduced_to_luminance(self, tmp_path, rng):
        rgb = rng.random((8, 8, 3))
        write_image(tmp_path / "c_1.ppm", rgb)
        write_image(tmp_path / "c_2.ppm", rgb)
        (p,) = load_dataset(tmp_path)
        assert p.x1.ndim == 2

    def test_synthetic_dir(self, synth_dir):
        assert len(load_dataset(synth_dir)) == 4


class TestSampling:
    def test_zero(self, pairs):
        assert list(sample_patches(pairs, 0, 16, seed=0)) == []

    def test_deterministic(self, pairs):
        a = list(sample_patches(pairs, 20, 16, seed=5))
        b = list(sample_patches(pairs, 20, 16, seed=5))
        assert len(a) == 20
        for pa, pb in zip(a, b):
            assert pa.origin == pb.origin and pa.p1.tobytes() == pb.p1.tobytes()

    def test_patches_colocated(self, pairs):
        for patch in sample_patches(pairs, 30, 16, seed=2):
            y, x = patch.origin
            src = pairs[patch.pair_index]
            assert patch.p1.shape == patch.p2.shape == (16, 16)
            np.testing.assert_array_equal(patch.p1, src.x1[y:y + 16, x:x + 16])
            np.testing.assert_array_equal(patch.p2, src.x2[y:y + 16, x:x + 16])

    def test_pair_frequency_uniform(self, rng):
        pairs = [ImagePair(str(i), *rng.random((2, 70, 66)).astype(np.float32)) for i in range(60)]
        counts = np.zeros(60)
        n = 50_000
        for patch in sample_patches(pairs, n, 64, seed=0):
            counts[patch.pair_index] += 1
        assert counts.sum() == n
        expected = n / 60
        chi2 = ((counts - expected) ** 2 / expected).sum()
        dof = 59
        assert abs(chi2 - dof) < 3 * np.sqrt(2 * dof)

    def test_small_images_excluded(self, pairs, rng):
        pairs = pairs + [ImagePair("tiny", *rng.random((2, 8, 8)).astype(np.float32))]
        with pytest.warns(UserWarning, match="1 image pair"):
            got = list(sample_patches(pairs, 50, 16, seed=0))
        assert all(p.pair_index != 3 for p in got)


class TestLearningRate:
    def test_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-3
        assert lr_at(1000, cfg) == pytest.approx(0.96e-3, rel=1e-15)
        assert lr_at(2500, cfg) == pytest.approx(1e-3 * 0.96 ** 2.5, rel=1e-12)

    def test_continuous(self):
        cfg = TrainConfig()
        assert lr_at(999, cfg) > lr_at(1000, cfg) > lr_at(1001, cfg)


class TestOptimizers:
    @pytest.mark.parametrize("opt", [SGD(weight_decay=1e-4), Adam(weight_decay=1e-4)])
    def test_weight_decay_with_zero_gradient(self, opt):
        weights = init(MFNetConfig.tiny())
        before = {n: t.data.copy() for n, t in weights.named_parameters()}
        for t in weights.parameters():
            t.grad = np.zeros_like(t.data)
        lr = 1e-3
        opt.step(weights.named_parameters(), lr)
        for n, t in weights.named_parameters():
            np.testing.assert_array_equal(t.data, before[n] * (1 - lr * 1e-4))

    def test_adam_first_step_size(self):
        p = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0, -2.0, 0.5, -0.1], dtype=np.float32).reshape(p.shape)
        Adam().step([("p", p)], 0.01)
        # bias-corrected first step moves every coordinate by lr against the gradient sign
        np.testing.assert_allclose(p.data.ravel(), [-0.01, 0.01, -0.01, 0.01], rtol=1e-5)

    def test_sgd_step(self):
        p = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        p.grad = np.array([[[[2.0, -4.0]]]])
        SGD().step([("p", p)], 0.5)
        np.testing.assert_allclose(p.data.ravel(), [0.0, 3.0])


class TestTrainStep:
    def batch(self, pairs):
        return list(sample_patches(pairs, 2, 16, seed=3))

    def test_zero_lr_leaves_weights(self, tmp_path, pairs):
        cfg = small_cfg(tmp_path, lr0=0.0)
        weights = init(cfg.model)
        before = [t.data.tobytes() for t in weights.parameters()]
        loss = train_step(weights, self.batch(pairs), 0, cfg, Adam(cfg.weight_decay))
        assert np.isfinite(loss)
        assert [t.data.tobytes() for t in weights.parameters()] == before

    def test_loss_range_and_grads_cleared(self, tmp_path, pairs):
        cfg = small_cfg(tmp_path, model=MFNetConfig.tiny())
        weights = init(cfg.model)
        loss = train_step(weights, self.batch(pairs), 0, cfg, Adam(cfg.weight_decay))
        assert 0 <= loss <= 2
        assert all(t.grad is None for t in weights.parameters())

    def test_empty_batch(self, tmp_path):
        cfg = small_cfg(tmp_path)
        with pytest.raises(ValueError):
            train_step(init(cfg.model), [], 0, cfg, SGD())

    def test_non_finite_loss_aborts(self, tmp_path, pairs, monkeypatch):
        cfg = small_cfg(tmp_path)

        def broken(x1, x2, y):
            return Tensor(np.full((1, 1, 1, 1), np.nan))

        monkeypatch.setattr(tr, "fusion_loss", broken)
        with pytest.raises(FloatingPointError, match="step 7"):
            train_step(init(cfg.model), self.batch(pairs), 7, cfg, SGD())


class TestTrain:
    def test_step_count_and_outputs(self, tmp_path, pairs):
        cfg = small_cfg(tmp_path, iters_per_epoch=2)
        ck = train(cfg, pairs=pairs)
        assert ck.step == 2 and [h[0] for h in ck.loss_history] == [0, 1]
        run = tmp_path / "run"
        assert (run / "final.mfc").exists() and (run / "ckpt_0000002.mfc").exists()
        lines = (run / "loss.log").read_text().splitlines()
        assert len(lines) == 2
        step, lr, loss = lines[1].split("\t")
        assert int(step) == 1 and float(lr) == pytest.approx(lr_at(1, cfg), rel=1e-6)
        assert 0 <= float(loss) <= 2

    def test_deterministic(self, tmp_path, pairs):
        a = train(small_cfg(tmp_path / "a"), pairs=pairs)
        b = train(small_cfg(tmp_path / "b"), pairs=pairs)
        for (_, ta), (_, tb) in zip(a.weights.named_parameters(), b.weights.named_parameters()):
            assert ta.data.tobytes() == tb.data.tobytes()

    @pytest.mark.parametrize("split", [1, 2, 3])
    def test_resume_equivalence(self, tmp_path, pairs, split):
        full = train(small_cfg(tmp_path / "full"), pairs=pairs)
        cfg = small_cfg(tmp_path / "part")
        train(cfg, pairs=pairs, max_steps=split)
        resumed = checkpoint.load(tmp_path / "part" / "run" / "final.mfc")
        assert resumed.step == split
        done = train(cfg, resume=resumed, pairs=pairs)
        assert done.step == full.step
        assert done.loss_history == full.loss_history
        for (_, ta), (_, tb) in zip(done.weights.named_parameters(), full.weights.named_parameters()):
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_full_size_defaults_accepted(self):
        cfg = TrainConfig(data_dir="somewhere").validate()
        assert cfg.total_steps == cfg.epochs * 400

    @pytest.mark.parametrize("kw", [dict(patch_size=6), dict(lr_decay_rate=1.5), dict(lr0=0.0),
                                    dict(batch_size=0), dict(optimizer="rmsprop")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            dataclasses.replace(TrainConfig(data_dir="x"), **kw).validate()
