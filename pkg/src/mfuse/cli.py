"""``mfuse`` command line: train, fuse, eval, synth, gradcheck.

Exit codes: 0 ok, 1 generic failure, 2 input mismatch, 3 checkpoint error,
4 config error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import gradcheck as gc
from .checkpoint import CheckpointError, load
from .config import ConfigError, load_config
from .imageio import EXTENSIONS, luminance, read_image, rgb_to_ycbcr, write_image, ycbcr_to_rgb
from .metrics import (average_fuse, evaluate, format_report, half_plane_mask, local_std_same,
                      select_fuse, synth_pair, synth_scene)
from .model import MFNetWeights, fuse_array
from .train import load_dataset, train

EXIT_OK, EXIT_FAIL, EXIT_MISMATCH, EXIT_CKPT, EXIT_CONFIG = 0, 1, 2, 3, 4

log = logging.getLogger("mfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAIL, f"{self.prog}: error: {message}\n")


def _fail(code: int, message: str) -> int:
    print(f"mfuse: {message}", file=sys.stderr)
    return code


def _load_weights(path) -> MFNetWeights:
    return load(path).weights


def fuse_images(weights: MFNetWeights, img1: np.ndarray, img2: np.ndarray,
                color: str = "luma") -> np.ndarray:
    """Fuse two images of equal size; RGB pairs keep colour in ``color`` mode.

    Chroma at each pixel comes from the source whose luminance has the larger
    7x7 local standard deviation there.
    """
    if img1.shape[:2] != img2.shape[:2]:
        raise ValueError(f"image sizes differ: {img1.shape[:2]} vs {img2.shape[:2]}")
    y1, y2 = luminance(img1), luminance(img2)
    fused = fuse_array(weights, y1, y2).astype(np.float64)
    if color != "color" or img1.ndim != 3 or img2.ndim != 3:
        return fused
    _, cb1, cr1 = rgb_to_ycbcr(img1)
    _, cb2, cr2 = rgb_to_ycbcr(img2)
    pick1 = local_std_same(y1) >= local_std_same(y2)
    return ycbcr_to_rgb(fused, np.where(pick1, cb1, cb2), np.where(pick1, cr1, cr2))


def cmd_fuse(args) -> int:
    try:
        weights = _load_weights(args.ckpt)
    except CheckpointError as exc:
        return _fail(EXIT_CKPT, str(exc))
    try:
        a, b = read_image(args.in1), read_image(args.in2)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_FAIL, f"cannot read input: {exc}")
    if a.shape[:2] != b.shape[:2]:
        return _fail(EXIT_MISMATCH, f"{args.in1} is {a.shape[1]}x{a.shape[0]} but "
                                    f"{args.in2} is {b.shape[1]}x{b.shape[0]}")
    write_image(args.out, fuse_images(weights, a, b, args.color))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"{args.config}: {exc}")
    resume = None
    if args.resume:
        try:
            resume = load(args.resume)
        except CheckpointError as exc:
            return _fail(EXIT_CKPT, str(exc))
        if resume.config.model != cfg.model:
            return _fail(EXIT_CONFIG, "model settings in --config differ from the checkpoint")
    try:
        pairs = load_dataset(cfg.data_dir)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_MISMATCH, str(exc))
    total = cfg.total_steps

    def progress(step, lr, loss):
        print(f"step {step}/{total}  lr {lr:.6e}  loss {loss:.6f}", flush=True)

    ckpt = train(cfg, resume=resume, pairs=pairs, progress=progress)
    print(f"wrote {Path(cfg.out_dir) / 'final.mfc'} at step {ckpt.step}")
    return EXIT_OK


def eval_pairs(pairs, fuse: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> str:
    rows = [(p.name, evaluate(p.x1, p.x2, fuse(p.x1, p.x2))) for p in pairs]
    return format_report(rows)


_BASELINES = {
    "average": average_fuse,
    "select": select_fuse,
    "source1": lambda a, b: a,
}


def cmd_eval(args) -> int:
    if args.method == "network":
        if not args.ckpt:
            return _fail(EXIT_FAIL, "--ckpt is required for --method network")
        try:
            weights = _load_weights(args.ckpt)
        except CheckpointError as exc:
            return _fail(EXIT_CKPT, str(exc))

        def fuse(a, b):
            return fuse_array(weights, a, b).astype(np.float64)
    else:
        fuse = _BASELINES[args.method]
    try:
        pairs = load_dataset(args.data)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_MISMATCH, str(exc))
    table = eval_pairs(pairs, fuse)
    Path(args.report).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    sources: list[tuple[str, Optional[np.ndarray]]] = []
    if args.src:
        src = Path(args.src)
        if not src.is_dir():
            return _fail(EXIT_FAIL, f"source directory {src} does not exist")
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in EXTENSIONS)
        for p in files:
            try:
                sources.append((p.stem, luminance(read_image(p))))
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", p, exc)
        if not sources:
            return _fail(EXIT_FAIL, f"no readable images in {src}")
    for i in range(args.scenes):
        sources.append((f"scene{i:03d}", None))
    if not sources:
        return _fail(EXIT_FAIL, "nothing to do: give --src or --scenes")
    out.mkdir(parents=True, exist_ok=True)
    for name, sharp in sources:
        if sharp is None:
            sharp = synth_scene((args.size, args.size), rng)
        mask = half_plane_mask(sharp.shape, rng)
        p1, p2 = synth_pair(sharp, mask, args.sigma)
        write_image(out / f"{name}_1.png", p1)
        write_image(out / f"{name}_2.png", p2)
        if args.keep_sharp:
            write_image(out / f"{name}_ref.png", sharp)
    print(f"wrote {len(sources)} pair(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gc.run(args.seed, args.instances, corrupt=args.corrupt)
    ok = True
    for op, err in errors.items():
        passed = err < gc.TOLERANCE
        ok &= passed
        print(f"{op:12s} max_rel_err={err:.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfuse", description="Unsupervised multi-focus image fusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a fusion network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one image pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in1", required=True)
    p.add_argument("--in2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--color", choices=("luma", "color"), default="luma")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="fuse and score every pair in a dataset directory")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--method", choices=("network",) + tuple(_BASELINES), default="network")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="make synthetic multi-focus pairs")
    p.add_argument("--src")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=0, help="also generate N random scenes")
    p.add_argument("--size", type=int, default=128, help="side length of generated scenes")
    p.add_argument("--keep-sharp", action="store_true", help="also write <name>_ref.png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt", choices=gc.OPS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        return _fail(EXIT_FAIL, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
