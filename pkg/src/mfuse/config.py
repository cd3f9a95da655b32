"""Training configuration and its flat ``key = value`` text format.

Example file::

    # desk-scale run
    data_dir = data/synth
    out_dir = runs/tiny
    model = tiny          # preset: tiny | full
    model.channels = 8    # individual overrides
    epochs = 2
    batch_size = 8
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .model import PRESETS, MFNetConfig


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "runs/default"
    patch_size: int = 64
    num_patches: int = 50_000
    iters_per_epoch: int = 400
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 1e-3
    lr_decay_rate: float = 0.96
    lr_decay_steps: int = 1000
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 400
    model: MFNetConfig = field(default_factory=MFNetConfig)

    def validate(self) -> "TrainConfig":
        if self.patch_size < 7:
            raise ConfigError(f"patch_size must be >= 7 (one SSIM window), got {self.patch_size}")
        for name in ("num_patches", "iters_per_epoch", "epochs", "batch_size",
                     "lr_decay_steps", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr0", "lr_decay_rate"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.weight_decay <= 1.0:
            raise ConfigError(f"weight_decay must lie in [0, 1], got {self.weight_decay}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch


_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig) if f.name != "model"}
_MODEL_FIELDS = {f.name: f for f in fields(MFNetConfig)}


def _convert(raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str}[typ]
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def to_items(cfg: TrainConfig) -> list[tuple[str, str]]:
    """Flat (key, value) pairs; floats use repr so they parse back exactly."""
    items = [(name, repr(v) if isinstance(v, float) else str(v))
             for name, v in ((n, getattr(cfg, n)) for n in _TRAIN_FIELDS)]
    for name in _MODEL_FIELDS:
        v = getattr(cfg.model, name)
        items.append((f"model.{name}", repr(v) if isinstance(v, float) else str(v)))
    return items


def from_items(items, require_data_dir: bool = True) -> TrainConfig:
    """Build a config from (lineno, key, value) triples."""
    train_kw: dict = {}
    model_kw: dict = {}
    preset = None
    for lineno, key, raw in items:
        try:
            if key == "model":
                if raw not in PRESETS:
                    raise ConfigError(f"unknown model preset {raw!r} (choose {sorted(PRESETS)})", lineno)
                preset = raw
            elif key.startswith("model."):
                name = key[len("model."):]
                if name not in _MODEL_FIELDS:
                    raise ConfigError(f"unknown key {key!r}", lineno)
                model_kw[name] = _convert(raw, _MODEL_FIELDS[name].type)
            elif key in _TRAIN_FIELDS:
                train_kw[key] = _convert(raw, _TRAIN_FIELDS[key].type)
            else:
                raise ConfigError(f"unknown key {key!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value {raw!r} for {key}: {exc}", lineno) from None
    base = PRESETS[preset]() if preset else MFNetConfig()
    if "seed" in train_kw and "seed" not in model_kw:
        model_kw["seed"] = train_kw["seed"]
    try:
        model = dataclasses.replace(base, **model_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = TrainConfig(model=model, **train_kw)
    if require_data_dir and not cfg.data_dir:
        raise ConfigError("data_dir is required")
    return cfg.validate()


def parse_lines(lines) -> list[tuple[int, str, str]]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", lineno)
        key, raw = (part.strip() for part in text.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        out.append((lineno, key, raw))
    return out


def load_config(path) -> TrainConfig:
    """Read a config file; a relative data_dir/out_dir resolves against the file's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = from_items(parse_lines(text.splitlines()))
    for name in ("data_dir", "out_dir"):
        p = Path(getattr(cfg, name))
        if not p.is_absolute():
            setattr(cfg, name, str(path.parent / p))
    if not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data_dir {cfg.data_dir} does not exist")
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))
