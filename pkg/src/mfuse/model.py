"""Three-branch fully convolutional fusion network.

Topology, for sources ``x1`` and ``x2``::

    f1  = post1(branch1(stem1(x1)))
    f2  = post2(branch2(stem2(x2)))
    avg = branch_avg(stem_avg((x1 + x2) / 2))
    y   = recon(f1 + f2 + avg)

Every convolution is 3x3, stride 1, zero padded, followed by a leaky ReLU,
except ``post1``/``post2`` (linear) and the last reconstruction layer
(sigmoid, one output channel). Nothing ever changes spatial size, so the
network runs on images of any size.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor


@dataclass
class MFNetConfig:
    channels: int = 64
    d1: int = 5
    d2: int = 6
    d3: int = 7
    lrelu_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if min(self.d1, self.d2, self.d3) < 1:
            raise ValueError("branch depths d1, d2, d3 must all be >= 1")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ValueError("lrelu_slope must lie in (0, 1)")

    @classmethod
    def tiny(cls, seed: int = 0) -> "MFNetConfig":
        """Narrow, shallow preset used for CPU-scale training and tests."""
        return cls(channels=8, d1=2, d2=3, d3=3, seed=seed)


PRESETS = {"full": MFNetConfig, "tiny": MFNetConfig.tiny}


def _conv(rng: np.random.Generator, cin: int, cout: int, slope: float, dtype) -> ConvParams:
    # He initialisation adjusted for the leaky ReLU slope
    std = math.sqrt(2.0 / ((1.0 + slope ** 2) * cin * 9))
    w = rng.standard_normal((cout, cin, 3, 3)) * std
    return ConvParams(
        Tensor(w.astype(dtype), requires_grad=True),
        Tensor(np.zeros((1, 1, 1, cout), dtype=dtype), requires_grad=True),
    )


@dataclass
class MFNetWeights:
    config: MFNetConfig
    stem1: ConvParams
    stem2: ConvParams
    stem_avg: ConvParams
    branch1: list[ConvParams]
    branch2: list[ConvParams]
    branch_avg: list[ConvParams]
    post1: ConvParams
    post2: ConvParams
    recon: list[ConvParams] = field(default_factory=list)

    def layers(self) -> Iterator[tuple[str, ConvParams]]:
        """All convolutions in the fixed order used for serialisation."""
        for name in ("stem1", "stem2", "stem_avg"):
            yield name, getattr(self, name)
        for name in ("branch1", "branch2", "branch_avg"):
            for i, p in enumerate(getattr(self, name)):
                yield f"{name}.{i}", p
        yield "post1", self.post1
        yield "post2", self.post2
        for i, p in enumerate(self.recon):
            yield f"recon.{i}", p

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, p in self.layers():
            out.append((f"{name}.weight", p.weight))
            out.append((f"{name}.bias", p.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def copy(self) -> "MFNetWeights":
        src = dict(self.named_parameters())
        other = init(self.config, dtype=self.parameters()[0].dtype)
        for name, t in other.named_parameters():
            t.data = src[name].data.copy()
        return other


def init(config: MFNetConfig, dtype=np.float32) -> MFNetWeights:
    """Fresh weights: zero-mean Gaussian scaled by fan-in, zero biases, seeded."""
    rng = np.random.default_rng(config.seed)
    c, s = config.channels, config.lrelu_slope

    def stack(depth: int) -> list[ConvParams]:
        return [_conv(rng, c, c, s, dtype) for _ in range(depth)]

    stem1 = _conv(rng, 1, c, s, dtype)
    stem2 = _conv(rng, 1, c, s, dtype)
    stem_avg = _conv(rng, 1, c, s, dtype)
    branch1 = stack(config.d1)
    branch2 = stack(config.d1)
    branch_avg = stack(config.d2)
    post1 = _conv(rng, c, c, s, dtype)
    post2 = _conv(rng, c, c, s, dtype)
    recon = stack(config.d3 - 1) + [_conv(rng, c, 1, s, dtype)]
    return MFNetWeights(config, stem1, stem2, stem_avg, branch1, branch2, branch_avg,
                        post1, post2, recon)


def _act(x: Tensor, p: ConvParams, slope: float) -> Tensor:
    return T.leaky_relu(T.conv2d(x, p), slope)


def _extract(x: Tensor, stem: ConvParams, stack: list[ConvParams], slope: float) -> Tensor:
    h = _act(x, stem, slope)
    for p in stack:
        h = _act(h, p, slope)
    return h


def forward(weights: MFNetWeights, x1, x2) -> Tensor:
    """Fused image for the source batch ``x1``, ``x2`` (both (N, 1, H, W), values in [0, 1])."""
    x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
    x2 = x2 if isinstance(x2, Tensor) else Tensor(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"source images differ in shape: {x1.shape} vs {x2.shape}")
    if x1.shape[1] != 1:
        raise ValueError(f"expected single-channel inputs, got {x1.shape[1]} channels")
    slope = weights.config.lrelu_slope
    w = weights
    f1 = T.conv2d(_extract(x1, w.stem1, w.branch1, slope), w.post1)
    f2 = T.conv2d(_extract(x2, w.stem2, w.branch2, slope), w.post2)
    avg = T.scale(T.add(x1, x2), 0.5)
    fa = _extract(avg, w.stem_avg, w.branch_avg, slope)
    h = T.add(T.add(f1, f2), fa)
    for p in w.recon[:-1]:
        h = _act(h, p, slope)
    return T.sigmoid(T.conv2d(h, w.recon[-1]))


def fuse_array(weights: MFNetWeights, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Fuse two 2-D luminance images and return the 2-D result."""
    dtype = weights.parameters()[0].dtype
    a = np.asarray(x1, dtype=dtype)[None, None]
    b = np.asarray(x2, dtype=dtype)[None, None]
    return forward(weights, a, b).data[0, 0]


def config_dict(config: MFNetConfig) -> dict:
    return asdict(config)
