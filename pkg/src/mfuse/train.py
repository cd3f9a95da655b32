"""Unsupervised training: dataset loading, patch sampling, optimisers, the step loop."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load, save
from .config import TrainConfig
from .imageio import EXTENSIONS, luminance, read_image
from .model import MFNetWeights, forward, init
from .ssim import fusion_loss

log = logging.getLogger(__name__)


@dataclass
class ImagePair:
    name: str
    x1: np.ndarray
    x2: np.ndarray


@dataclass
class PatchPair:
    p1: np.ndarray
    p2: np.ndarray
    pair_index: int
    origin: tuple[int, int]


def find_pairs(directory) -> list[tuple[str, Path, Path]]:
    """``<name>_1.<ext>`` / ``<name>_2.<ext>`` file pairs in lexicographic name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    firsts, seconds = {}, {}
    for p in directory.iterdir():
        if p.suffix.lower() not in EXTENSIONS:
            continue
        stem = p.stem
        if stem.endswith("_1"):
            firsts[stem[:-2]] = p
        elif stem.endswith("_2"):
            seconds[stem[:-2]] = p
    names = sorted(set(firsts) & set(seconds))
    for orphan in sorted(set(firsts) ^ set(seconds)):
        log.warning("%s: only one focus version present, skipped", orphan)
    return [(n, firsts[n], seconds[n]) for n in names]


def load_dataset(directory) -> list[ImagePair]:
    files = find_pairs(directory)
    if not files:
        raise ValueError(f"no <name>_1/<name>_2 image pairs found in {directory}")
    pairs = []
    for name, f1, f2 in files:
        a = luminance(read_image(f1)).astype(np.float32)
        b = luminance(read_image(f2)).astype(np.float32)
        if a.shape != b.shape:
            raise ValueError(f"pair {name}: {f1.name} is {a.shape} but {f2.name} is {b.shape}")
        pairs.append(ImagePair(name, a, b))
    return pairs


def crop_origins(pairs: list[ImagePair], n: int, size: int, seed) -> np.ndarray:
    """(n, 3) array of (pair index, top, left), drawn uniformly; undersized pairs excluded."""
    usable = [i for i, p in enumerate(pairs) if min(p.x1.shape) >= size]
    skipped = len(pairs) - len(usable)
    if skipped:
        warnings.warn(f"{skipped} image pair(s) smaller than {size}x{size} excluded from sampling")
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if not usable:
        raise ValueError(f"no image pair is at least {size}x{size}")
    rng = np.random.default_rng(seed)
    idx = np.asarray(usable)[rng.integers(0, len(usable), n)]
    out = np.empty((n, 3), dtype=np.int64)
    out[:, 0] = idx
    for j, i in enumerate(idx):
        h, w = pairs[i].x1.shape
        out[j, 1] = rng.integers(0, h - size + 1)
        out[j, 2] = rng.integers(0, w - size + 1)
    return out


def crop(pairs: list[ImagePair], origin, size: int) -> PatchPair:
    i, y, x = (int(v) for v in origin)
    p = pairs[i]
    return PatchPair(p.x1[y:y + size, x:x + size], p.x2[y:y + size, x:x + size], i, (y, x))


def sample_patches(pairs: list[ImagePair], n: int, size: int, seed) -> Iterator[PatchPair]:
    """Exactly ``n`` co-located random crops, reproducible for a given seed."""
    for origin in crop_origins(pairs, n, size, seed):
        yield crop(pairs, origin, size)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Continuous exponential decay: lr0 * rate ** (step / decay_steps)."""
    return cfg.lr0 * cfg.lr_decay_rate ** (step / cfg.lr_decay_steps)


class SGD:
    """Plain gradient descent with decoupled weight decay."""

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, named_params, lr: float) -> None:
        shrink = 1.0 - lr * self.weight_decay
        for _, p in named_params:
            g = p.grad if p.grad is not None else 0.0
            p.data = p.data * shrink - lr * g

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam moments with decoupled weight decay (param shrinks before the moment step).

    The bias correction uses the optimiser's own step counter ``t``, which is
    the number of updates applied so far.
    """

    def __init__(self, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        shrink = 1.0 - lr * self.weight_decay
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data * shrink - lr * update

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray], step: int = 0) -> None:
        self.t = step
        for key, arr in state.items():
            kind, _, name = key[len("adam."):].partition(".")
            {"m": self.m, "v": self.v}[kind][name] = arr


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.weight_decay) if cfg.optimizer == "adam" else SGD(cfg.weight_decay)


def _stack(patches: list[PatchPair]) -> tuple[np.ndarray, np.ndarray]:
    a = np.stack([p.p1 for p in patches])[:, None].astype(np.float32)
    b = np.stack([p.p2 for p in patches])[:, None].astype(np.float32)
    return a, b


def train_step(weights: MFNetWeights, batch: list[PatchPair], step: int, cfg: TrainConfig,
               optimizer) -> float:
    """One forward/backward/update; returns the loss measured before the update."""
    if not batch:
        raise ValueError("empty batch")
    x1, x2 = _stack(batch)
    weights.zero_grad()
    y = forward(weights, x1, x2)
    loss = fusion_loss(x1, x2, y)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(
            f"step {step}: non-finite loss {value} (output range "
            f"[{np.nanmin(y.data):.4g}, {np.nanmax(y.data):.4g}])"
        )
    T.backward(loss)
    optimizer.step(weights.named_parameters(), lr_at(step, cfg))
    weights.zero_grad()
    return value


def batch_for_step(pairs, origins: np.ndarray, step: int, cfg: TrainConfig) -> list[PatchPair]:
    """Batch drawn with replacement from the patch pool; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.integers(0, len(origins), cfg.batch_size)
    return [crop(pairs, origins[i], cfg.patch_size) for i in picks]


def write_loss_log(path, history) -> None:
    with open(path, "w") as fh:
        for step, lr, loss in history:
            fh.write(f"{step}\t{lr:.6e}\t{loss:.6f}\n")


def train(cfg: TrainConfig, resume: Optional[Checkpoint] = None,
          pairs: Optional[list[ImagePair]] = None, max_steps: Optional[int] = None,
          progress: Optional[Callable[[int, float, float], None]] = None) -> Checkpoint:
    """Run (or continue) training up to ``cfg.total_steps`` (or ``max_steps``).

    Checkpoints go to ``<out_dir>/ckpt_<step>.mfc`` every ``checkpoint_every``
    steps and to ``<out_dir>/final.mfc`` at the end, along with ``loss.log``.
    """
    cfg.validate()
    if pairs is None:
        pairs = load_dataset(cfg.data_dir)
    origins = crop_origins(pairs, cfg.num_patches, cfg.patch_size, cfg.seed)
    optimizer = make_optimizer(cfg)
    if resume is not None:
        weights, step = resume.weights, resume.step
        history = list(resume.loss_history)
        if isinstance(optimizer, Adam):
            optimizer.load_state(resume.optimizer_state, step)
    else:
        weights, step, history = init(cfg.model), 0, []
    end = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot() -> Checkpoint:
        return Checkpoint(weights, cfg, step, history, optimizer.state())

    while step < end:
        batch = batch_for_step(pairs, origins, step, cfg)
        lr = lr_at(step, cfg)
        loss = train_step(weights, batch, step, cfg, optimizer)
        history.append((step, lr, loss))
        step += 1
        if progress is not None:
            progress(step, lr, loss)
        if step % cfg.checkpoint_every == 0:
            save(snapshot(), out_dir / f"ckpt_{step:07d}.mfc")
    final = snapshot()
    save(final, out_dir / "final.mfc")
    write_loss_log(out_dir / "loss.log", history)
    return final


def resume_from(path, cfg: Optional[TrainConfig] = None) -> tuple[TrainConfig, Checkpoint]:
    ckpt = load(path)
    return (cfg or ckpt.config), ckpt
