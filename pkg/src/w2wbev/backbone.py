"""Four-stage feature extraction with top-down multi-scale fusion.

A small stand-in backbone: each stage is conv(stride 2) -> relu ->
conv(stride 1) -> relu, so stage k has stride 2^k.  Fusion projects each
stage to a common channel width with bias-free 1x1 convs and accumulates
top-down through nearest-neighbor upsampling, yielding levels C1 (stride
16, coarsest) through C4 (stride 2, finest fused).

Ground panoramas are angularly periodic and use circular width padding;
aerial and FoV-cropped ground inputs use zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from w2wbev import tensor as T
from w2wbev.config import ConfigError
from w2wbev.params import ParamSet, fan_in_init
from w2wbev.tensor import Tensor

LEVEL_STRIDES = (16, 8, 4, 2)   # C1..C4
STAGE_COUNT = 4


@dataclass
class Pyramid:
    """Fused multi-scale maps C1..C4, all with c_model channels."""

    levels: list[Tensor]        # index 0 = C1 (stride 16) ... 3 = C4 (stride 2)

    def __post_init__(self):
        channels = {lvl.shape[-1] for lvl in self.levels}
        if len(self.levels) != 4 or len(channels) != 1:
            raise ValueError("Pyramid needs four levels with a common channel count")

    @property
    def c_model(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def strides(self):
        return LEVEL_STRIDES


def init_branch_params(params: ParamSet, prefix: str, c_model: int,
                       rng: np.random.Generator, dtype=np.float32) -> None:
    """Register one branch's stage convs and lateral projections."""
    cin = 3
    for k in range(1, STAGE_COUNT + 1):
        params.add(f"{prefix}.stage{k}.conv1.kernel",
                   fan_in_init(rng, (3, 3, cin, c_model), 9 * cin, dtype))
        params.add(f"{prefix}.stage{k}.conv1.bias", np.zeros(c_model, dtype=dtype))
        params.add(f"{prefix}.stage{k}.conv2.kernel",
                   fan_in_init(rng, (3, 3, c_model, c_model), 9 * c_model, dtype))
        params.add(f"{prefix}.stage{k}.conv2.bias", np.zeros(c_model, dtype=dtype))
        cin = c_model
    # bias-free so fusion is linear in the stage maps
    for level in range(1, STAGE_COUNT + 1):
        params.add(f"{prefix}.lateral{level}.kernel",
                   fan_in_init(rng, (1, 1, c_model, c_model), c_model, dtype))


def extract_stages(image: Tensor, params: ParamSet, prefix: str,
                   padding_mode: str) -> list[Tensor]:
    """Run the four stages; returns [S1 (stride 2), ..., S4 (stride 16)]."""
    H, W = image.shape[0], image.shape[1]
    if H % 16 or W % 16:
        raise ConfigError(
            f"backbone input dims ({H}, {W}) must be divisible by 16")
    x = image
    stages = []
    for k in range(1, STAGE_COUNT + 1):
        x = T.conv2d(x, params[f"{prefix}.stage{k}.conv1.kernel"], stride=2,
                     padding_mode=padding_mode)
        x = T.relu(T.add(x, params[f"{prefix}.stage{k}.conv1.bias"]))
        x = T.conv2d(x, params[f"{prefix}.stage{k}.conv2.kernel"], stride=1,
                     padding_mode=padding_mode)
        x = T.relu(T.add(x, params[f"{prefix}.stage{k}.conv2.bias"]))
        stages.append(x)
    return stages


def fuse_topdown(stages: list[Tensor], params: ParamSet, prefix: str) -> Pyramid:
    """Top-down upsample-and-add fusion of the stage maps into C1..C4."""
    def proj(level: int, s: Tensor) -> Tensor:
        return T.conv2d(s, params[f"{prefix}.lateral{level}.kernel"], stride=1)

    c = proj(1, stages[3])
    levels = [c]
    for level, stage in zip((2, 3, 4), (stages[2], stages[1], stages[0])):
        c = T.add(proj(level, stage), T.upsample2x(c))
        levels.append(c)
    return Pyramid(levels)


def encode_ground(image: Tensor, params: ParamSet, prefix: str = "ground",
                  periodic: bool = True) -> Pyramid:
    mode = "circular_width" if periodic else "zero"
    return fuse_topdown(extract_stages(image, params, prefix, mode), params, prefix)


def encode_aerial(image: Tensor, params: ParamSet, prefix: str = "aerial") -> Tensor:
    """Aerial branch feature map: the C4-equivalent fused level (stride 2)."""
    stages = extract_stages(image, params, prefix, "zero")
    return fuse_topdown(stages, params, prefix).levels[3]
