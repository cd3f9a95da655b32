"""Unsupervised multi-focus image fusion with an SSIM-selection loss."""
from .model import MFNetConfig, MFNetWeights, forward, fuse_array, init
from .ssim import SsimConstants, fusion_loss, scope, window_stats
from .tensor import Tensor, backward

__all__ = [
    "MFNetConfig", "MFNetWeights", "SsimConstants", "Tensor", "backward", "forward",
    "fuse_array", "fusion_loss", "init", "scope", "window_stats",
]
__version__ = "0.1.0"
