"""Acceptance criteria for the primary components.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion (see conftest.py). The desk-scale training
run takes about two minutes on one CPU core.
"""
import dataclasses
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfuse import checkpoint, gradcheck, ssim
from mfuse.config import TrainConfig
from mfuse.metrics import average_fuse, entropy, make_synthetic_set, q_s
from mfuse.model import MFNetConfig, fuse_array, init
from mfuse.ssim import fusion_loss, mean_ssim, scope_score, selection_mask
from mfuse.tensor import Tensor
from mfuse.train import ImagePair, train

from . import oracles

GRADIENTS = "gradient suite"
IDENTITIES = "loss identities"
ORACLES = "oracle equivalence"
HYPERPARAMS = "hyperparameter conformance"
DESK = "desk-scale training"
SIZES = "variable-size inference"
METRICS = "metric sanity"
PERSIST = "determinism and persistence"


def _batch(a):
    return np.asarray(a, dtype=np.float64)[None, None]


# -- gradients ---------------------------------------------------------------

@pytest.mark.criterion(GRADIENTS)
def test_gradients_match_finite_differences():
    errors = gradcheck.run(seed=0, instances=20)
    assert set(errors) == {"conv2d", "leaky_relu", "sigmoid", "add", "scale", "mean_all", "fusion_loss"}
    assert gradcheck.EPS == 1e-3
    for op, err in errors.items():
        assert err < 1e-3, f"{op}: max relative error {err:.3e}"


@pytest.mark.criterion(GRADIENTS)
def test_gradcheck_command_exit_and_runtime():
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "mfuse.cli", "gradcheck"], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 7
    assert elapsed < 60


# -- loss identities ---------------------------------------------------------

@pytest.mark.criterion(IDENTITIES)
def test_identical_inputs_give_zero_loss():
    r = np.random.default_rng(10)
    for _ in range(50):
        h, w = r.integers(7, 40, size=2)
        x = r.random((h, w))
        assert fusion_loss(_batch(x), _batch(x), Tensor(_batch(x))).item() < 1e-6


@pytest.mark.criterion(IDENTITIES)
def test_loss_range():
    r = np.random.default_rng(11)
    for i in range(50):
        x1, x2, y = r.random((3, 16, 16))
        if i % 2:
            y = 1 - x1  # anti-correlated output pushes SSIM negative
        loss = fusion_loss(_batch(x1), _batch(x2), Tensor(_batch(y))).item()
        assert 0 <= loss <= 2


@pytest.mark.criterion(IDENTITIES)
def test_selection_ignores_output():
    r = np.random.default_rng(12)
    for _ in range(50):
        x1, x2, y = r.random((3, 13, 11))
        y2 = y + r.normal(0, 0.3, y.shape)
        mask = selection_mask(x1, x2)
        for out in (y, y2):
            # the scope map must equal SSIM against the source chosen from x1, x2 alone
            want = np.where(mask, ssim.ssim_map(x1, out), ssim.ssim_map(x2, out))
            np.testing.assert_array_equal(ssim.scope(x1, x2, out), want)


# -- oracles -----------------------------------------------------------------

images = st.tuples(st.integers(9, 15), st.integers(9, 15), st.integers(0, 2**31))


@pytest.mark.criterion(ORACLES)
@given(images)
@settings(max_examples=60)
def test_window_stats_oracle(case):
    h, w, seed = case
    x, y = np.random.default_rng(seed).random((2, h, w))
    s = ssim.window_stats(x, y)
    fast = np.stack([s.mean_x, s.mean_y, s.var_x, s.var_y, s.cov], axis=-1).reshape(-1, 5)
    np.testing.assert_allclose(fast, oracles.window_stats(x, y), rtol=0, atol=1e-10)


@pytest.mark.criterion(ORACLES)
@given(images)
@settings(max_examples=60)
def test_scope_oracle(case):
    h, w, seed = case
    x1, x2, y = np.random.default_rng(seed).random((3, h, w))
    np.testing.assert_allclose(ssim.scope(x1, x2, y).ravel(), oracles.scope(x1, x2, y), rtol=0, atol=1e-10)


@pytest.mark.criterion(ORACLES)
@given(images)
@settings(max_examples=60)
def test_q_s_oracle(case):
    h, w, seed = case
    x1, x2, f = np.random.default_rng(seed).random((3, h, w))
    assert abs(q_s(x1, x2, f) - oracles.q_s(x1, x2, f)) < 1e-10


# -- hyperparameters ---------------------------------------------------------

# reference hyperparameters the defaults must carry
QUOTED = dict(window=7, c1=1e-4, c2=9e-4, d1=5, d2=6, d3=7, channels=64, slope=0.2,
              patch=64, decay_rate=0.96, decay_steps=1000, patches=50_000, iters_per_epoch=400)


@pytest.mark.criterion(HYPERPARAMS)
def test_config_snapshot():
    cfg, model, k = TrainConfig(), MFNetConfig(), ssim.DEFAULT
    got = dict(window=k.window, c1=k.c1, c2=k.c2, d1=model.d1, d2=model.d2, d3=model.d3,
               channels=model.channels, slope=model.lrelu_slope, patch=cfg.patch_size,
               decay_rate=cfg.lr_decay_rate, decay_steps=cfg.lr_decay_steps,
               patches=cfg.num_patches, iters_per_epoch=cfg.iters_per_epoch)
    assert got == QUOTED
    assert cfg.model == model
    assert (ssim.C1, ssim.C2, ssim.WINDOW) == (1e-4, 9e-4, 7)


# -- desk-scale training -----------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    data = make_synthetic_set(5, shape=(128, 128), sigma=2.0, seed=0)
    pairs = [ImagePair(f"s{i}", p1.astype(np.float32), p2.astype(np.float32))
             for i, (_, p1, p2) in enumerate(data[:4])]
    cfg = TrainConfig(data_dir="synthetic", out_dir=str(tmp_path_factory.mktemp("desk")),
                      batch_size=8, patch_size=64, epochs=1, iters_per_epoch=500,
                      checkpoint_every=500, model=MFNetConfig.tiny(), seed=0)
    start = time.perf_counter()
    ck = train(cfg, pairs=pairs)
    return ck, data[4], time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(DESK)
def test_desk_loss_halves(desk):
    ck, _, elapsed = desk
    losses = np.array([h[2] for h in ck.loss_history])
    assert len(losses) == 500
    first, last = losses[:50].mean(), losses[-50:].mean()
    print(f"smoothed loss {first:.4f} -> {last:.4f} in {elapsed:.0f}s")
    assert last < 0.5 * first
    assert elapsed < 600


@pytest.mark.slow
@pytest.mark.criterion(DESK)
def test_desk_beats_average_on_held_out(desk):
    ck, (_, p1, p2), _ = desk
    fused = fuse_array(ck.weights, p1, p2).astype(np.float64)
    assert scope_score(p1, p2, fused) > scope_score(p1, p2, average_fuse(p1, p2))


@pytest.mark.slow
@pytest.mark.criterion(DESK)
def test_desk_closer_to_ground_truth_than_sources(desk):
    ck, (sharp, p1, p2), _ = desk
    fused = fuse_array(ck.weights, p1, p2).astype(np.float64)
    s = mean_ssim(sharp, fused)
    assert s > mean_ssim(sharp, p1) and s > mean_ssim(sharp, p2)


@pytest.mark.slow
@pytest.mark.criterion(SIZES)
@pytest.mark.parametrize("h,w", [(251, 173), (520, 520)])
def test_trained_model_any_size(desk, h, w):
    ck, _, _ = desk
    assert ck.config.patch_size == 64
    x1, x2 = np.random.default_rng(h).random((2, h, w)).astype(np.float32)
    out = fuse_array(ck.weights, x1, x2)
    assert out.shape == (h, w)
    assert np.isfinite(out).all() and (out > 0).all() and (out < 1).all()


# -- metrics -----------------------------------------------------------------

@pytest.mark.criterion(METRICS)
def test_metric_sanity():
    assert entropy(np.full((64, 64), 0.42)) == 0
    uniform = np.random.default_rng(0).integers(0, 256, (256, 256)) / 255
    assert abs(entropy(uniform) - 8.0) < 0.1
    x = np.random.default_rng(1).random((40, 40))
    assert abs(q_s(x, x, x) - 1) < 1e-9


# -- determinism and persistence ---------------------------------------------

def _small_cfg(out_dir, **kw):
    base = dict(data_dir="synthetic", out_dir=str(out_dir), patch_size=32, num_patches=100,
                batch_size=2, iters_per_epoch=3, epochs=2, checkpoint_every=3,
                model=MFNetConfig.tiny(seed=4), seed=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_pairs():
    return [ImagePair(f"s{i}", p1.astype(np.float32), p2.astype(np.float32))
            for i, (_, p1, p2) in enumerate(make_synthetic_set(2, shape=(48, 48), seed=9))]


@pytest.mark.criterion(PERSIST)
def test_fixed_seed_checkpoints_identical(tmp_path, small_pairs):
    run = tmp_path / "run"
    train(_small_cfg(run), pairs=small_pairs)
    first = {p.name: p.read_bytes() for p in run.glob("*.mfc")}
    shutil.rmtree(run)
    train(_small_cfg(run), pairs=small_pairs)
    second = {p.name: p.read_bytes() for p in run.glob("*.mfc")}
    assert set(first) == {"ckpt_0000003.mfc", "ckpt_0000006.mfc", "final.mfc"}
    assert first == second


@pytest.mark.criterion(PERSIST)
def test_checkpoint_round_trip(tmp_path, small_pairs):
    ck = train(_small_cfg(tmp_path), pairs=small_pairs)
    back = checkpoint.load(tmp_path / "final.mfc")
    assert back.step == ck.step and back.loss_history == ck.loss_history
    assert back.config == ck.config
    for (na, ta), (nb, tb) in zip(ck.weights.named_parameters(), back.weights.named_parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()


@pytest.mark.criterion(PERSIST)
@pytest.mark.parametrize("split", [1, 3, 5])
def test_resume_equivalence(tmp_path, small_pairs, split):
    full = train(_small_cfg(tmp_path / "full"), pairs=small_pairs)
    cfg = _small_cfg(tmp_path / "part")
    train(cfg, pairs=small_pairs, max_steps=split)
    done = train(cfg, resume=checkpoint.load(tmp_path / "part" / "final.mfc"), pairs=small_pairs)
    assert done.loss_history == full.loss_history
    tensors = [(tmp_path / d / "final.mfc").read_bytes().partition(b"END\n")[2] for d in ("part", "full")]
    assert tensors[0] == tensors[1]
    for (_, ta), (_, tb) in zip(done.weights.named_parameters(), full.weights.named_parameters()):
        assert ta.data.tobytes() == tb.data.tobytes()


@pytest.mark.criterion(PERSIST)
def test_config_fields_survive(tmp_path):
    cfg = dataclasses.replace(_small_cfg(tmp_path), lr0=1 / 7)
    checkpoint.save(checkpoint.Checkpoint(init(cfg.model), cfg), tmp_path / "c.mfc")
    assert checkpoint.load(tmp_path / "c.mfc").config == cfg
