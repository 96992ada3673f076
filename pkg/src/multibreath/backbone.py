"""CNN6-style feature extractor: ``[N,1,64,256] -> [N,512,4,16]`` under defaults.

Each block is conv(5x5, pad 2, no bias) -> batchnorm -> relu -> 2x2 average
pool, so every block halves both spatial dims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, RunningStats, Tensor
from .errors import ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (64, 128, 256, 512)
    kernel_size: int = 5
    pool_size: int = 2
    in_channels: int = 1
    # dataset-level standardisation of log-mel input
    input_mean: float = 0.0
    input_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"backbone needs at least one block with positive width, got {self.widths}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd so 'same' padding keeps spatial dims")
        if self.input_std <= 0:
            raise ValueError("input_std must be positive")

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def output_hw(self, h: int, w: int) -> tuple:
        k = self.pool_size ** self.num_blocks
        return h // k, w // k


def _block_names(i: int) -> tuple:
    p = f"backbone.block{i}"
    return f"{p}.conv.weight", f"{p}.bn.gamma", f"{p}.bn.beta", f"{p}.bn"


def init_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """Uniform(+-sqrt(6/fan_in)) conv kernels, gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    c_in = cfg.in_channels
    k = cfg.kernel_size
    for i, c_out in enumerate(cfg.widths):
        w_name, g_name, b_name, _ = _block_names(i)
        bound = np.sqrt(6.0 / (c_in * k * k))
        params[w_name] = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype))
        params[g_name] = Tensor(np.ones(c_out, dtype=dtype))
        params[b_name] = Tensor(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    return params


def init_running_stats(cfg: BackboneConfig, dtype=np.float32) -> dict:
    return {_block_names(i)[3]: RunningStats.fresh(c, dtype) for i, c in enumerate(cfg.widths)}


def parameter_count(cfg: BackboneConfig) -> int:
    total, c_in = 0, cfg.in_channels
    for c_out in cfg.widths:
        total += c_out * c_in * cfg.kernel_size ** 2 + 2 * c_out
        c_in = c_out
    return total


def forward_features(params, x: Tensor, cfg: BackboneConfig, stats: dict, mode: str = "eval") -> Tensor:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"backbone expects [N,{cfg.in_channels},H,W], got {x.shape}")
    div = cfg.pool_size ** cfg.num_blocks
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"input spatial dims {x.shape[2:]} not divisible by {div} "
                         f"({cfg.num_blocks} pooling blocks)")
    h = x
    if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
        h = ad.scale(ad.add_scalar(h, -cfg.input_mean), 1.0 / cfg.input_std)
    pad = cfg.kernel_size // 2
    for i in range(cfg.num_blocks):
        w_name, g_name, b_name, s_name = _block_names(i)
        h = ad.conv2d(h, params[w_name], None, stride=1, padding=pad)
        h = ad.batchnorm2d(h, params[g_name], params[b_name], stats[s_name], mode=mode)
        h = ad.relu(h)
        h = ad.avg_pool2d(h, cfg.pool_size)
    return h
