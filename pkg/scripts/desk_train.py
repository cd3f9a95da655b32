#!/usr/bin/env python3
"""Desk-scale training run on synthetic multi-focus pairs.

Trains the tiny preset on four random 128x128 scenes and scores the result on
a fifth, held-out scene against the pixel average, the local-std selection
baseline, and the sharp ground truth.

    python3 scripts/desk_train.py --steps 500 --seed 0
"""
import argparse
import tempfile
import time

import numpy as np

from mfuse.config import TrainConfig
from mfuse.metrics import average_fuse, make_synthetic_set, select_fuse
from mfuse.model import MFNetConfig, fuse_array
from mfuse.ssim import mean_ssim, scope_score
from mfuse.train import ImagePair, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=2.0)
    ap.add_argument("--out", default=None, help="run directory (default: a temp dir)")
    args = ap.parse_args()

    data = make_synthetic_set(5, shape=(128, 128), sigma=args.sigma, seed=args.seed)
    pairs = [ImagePair(f"s{i}", p1.astype(np.float32), p2.astype(np.float32))
             for i, (_, p1, p2) in enumerate(data[:4])]
    cfg = TrainConfig(data_dir="synthetic", out_dir=args.out or tempfile.mkdtemp(prefix="desk-"),
                      batch_size=args.batch, epochs=1, iters_per_epoch=args.steps,
                      checkpoint_every=args.steps, model=MFNetConfig.tiny(), seed=args.seed)

    def progress(step, lr, loss):
        if step % 50 == 0:
            print(f"step {step:4d}  loss {loss:.4f}", flush=True)

    start = time.perf_counter()
    ck = train(cfg, pairs=pairs, progress=progress)
    losses = np.array([h[2] for h in ck.loss_history])
    window = min(50, len(losses))
    print(f"trained {ck.step} steps in {time.perf_counter() - start:.0f}s, checkpoint in {cfg.out_dir}")
    print(f"smoothed loss {losses[:window].mean():.4f} -> {losses[-window:].mean():.4f}")

    sharp, p1, p2 = data[4]
    fused = fuse_array(ck.weights, p1, p2).astype(np.float64)
    print(f"{'method':10s} {'scope':>7s} {'ssim_gt':>8s}")
    for name, img in [("network", fused), ("average", average_fuse(p1, p2)),
                      ("select", select_fuse(p1, p2)), ("source1", p1), ("source2", p2)]:
        print(f"{name:10s} {scope_score(p1, p2, img):7.4f} {mean_ssim(sharp, img):8.4f}")


if __name__ == "__main__":
    main()
