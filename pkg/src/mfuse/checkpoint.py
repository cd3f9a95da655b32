"""Checkpoint file format.

A checkpoint is a UTF-8 text header followed by binary tensor records::

    MFUSE-CHECKPOINT 1
    step=<int>
    <config key>=<value>        # every TrainConfig / MFNetConfig field
    loss=<step>\\t<lr>\\t<loss>    # one line per recorded training step
    tensors=<count>
    END
    then <count> records, each:
    <name> <ndim> <dim0> ... <dimN-1>\\n
    <prod(dims)> float32 values, little-endian, row-major

Tensor order: network parameters in ``MFNetWeights.layers()`` order
(``<layer>.weight`` of shape (out, in, 3, 3), then ``<layer>.bias`` of shape
(out,)), followed by optimizer state tensors (``adam.m.<param>``,
``adam.v.<param>``) when present. Floats in the header are written with
``repr`` so they parse back exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, from_items, to_items
from .model import MFNetWeights, init

MAGIC = "MFUSE-CHECKPOINT"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    weights: MFNetWeights
    config: TrainConfig
    step: int = 0
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)


def _param_shape(name: str, arr: np.ndarray) -> tuple[int, ...]:
    return (arr.size,) if name.endswith(".bias") else arr.shape


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename) so an interrupted save never leaves a torn file."""
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}", f"step={ckpt.step}"]
    lines += [f"{k}={v}" for k, v in to_items(ckpt.config)]
    lines += [f"loss={s}\t{lr!r}\t{loss!r}" for s, lr, loss in ckpt.loss_history]
    records = [(n, t.data) for n, t in ckpt.weights.named_parameters()]
    records += list(ckpt.optimizer_state.items())
    lines += [f"tensors={len(records)}", "END"]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for name, arr in records:
            shape = _param_shape(name, arr)
            fh.write(f"{name} {len(shape)} {' '.join(map(str, shape))}\n".encode())
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_line(fh) -> str:
    raw = fh.readline()
    if not raw:
        raise CheckpointError("unexpected end of file")
    try:
        return raw.decode().rstrip("\n")
    except UnicodeDecodeError:
        raise CheckpointError("corrupt header") from None


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with fh:
        head = _read_line(fh).split()
        if len(head) != 2 or head[0] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if head[1] != str(VERSION):
            raise CheckpointError(f"unsupported checkpoint version {head[1]}")
        step, count = 0, None
        items, history = [], []
        while True:
            line = _read_line(fh)
            if line == "END":
                break
            key, _, value = line.partition("=")
            if key == "step":
                step = int(value)
            elif key == "tensors":
                count = int(value)
            elif key == "loss":
                s, lr, loss = value.split("\t")
                history.append((int(s), float(lr), float(loss)))
            else:
                items.append((None, key, value))
        if count is None:
            raise CheckpointError("header lacks tensor count")
        try:
            config = from_items(items, require_data_dir=False)
        except ValueError as exc:
            raise CheckpointError(f"bad config in checkpoint: {exc}") from None
        tensors = {}
        for _ in range(count):
            line = _read_line(fh)
            try:
                parts = line.split()
                name, ndim = parts[0], int(parts[1])
                shape = tuple(int(d) for d in parts[2:])
                if len(shape) != ndim:
                    raise ValueError
            except (IndexError, ValueError):
                raise CheckpointError(f"truncated or corrupt tensor record {line[:40]!r}") from None
            size = int(np.prod(shape))
            buf = fh.read(4 * size)
            if len(buf) != 4 * size:
                raise CheckpointError(f"truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)

    weights = init(config.model)
    for name, t in weights.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = tensors.pop(name)
        if arr.size != t.data.size:
            raise CheckpointError(f"parameter {name} has {arr.size} values, expected {t.data.size}")
        t.data = arr.reshape(t.shape)
    return Checkpoint(weights, config, step, history, tensors)
