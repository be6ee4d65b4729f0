"""BEV embedding initialization from ground features.

The finest fused ground level drives a per-pixel depth distribution; the
2-D features are lifted into a 3-D volume weighted by those probabilities,
the image-height axis is collapsed by max pooling, and the resulting
depth-by-width plane is bilinearly resampled onto the BEV grid (depth bins
become grid rows, panorama width becomes grid columns).  A learnable
positional embedding is added to the grid tokens; ground features never
carry one, which keeps the ground branch roll-equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from w2wbev import tensor as T
from w2wbev.config import ConfigError
from w2wbev.params import ParamSet, fan_in_init, normal_init
from w2wbev.tensor import Tensor


@dataclass
class DepthField:
    """Per-pixel depth probabilities over the finest ground level."""

    probs: Tensor               # (H4, W4, D); rows sum to 1 over D

    @property
    def bins(self) -> int:
        return self.probs.shape[-1]


@dataclass
class BevGrid:
    """BEV token grid plus its window geometry."""

    tokens: Tensor              # (H_b, W_b, C)
    window_count: int

    def __post_init__(self):
        root = math.isqrt(self.window_count)
        if root * root != self.window_count:
            raise ConfigError(
                f"window count {self.window_count} must be a perfect square")
        hb, wb = self.tokens.shape[0], self.tokens.shape[1]
        if hb % root or wb % root:
            raise ConfigError(
                f"sqrt(window count) {root} must divide grid dims ({hb}, {wb})")

    @property
    def window_dims(self) -> tuple[int, int]:
        root = math.isqrt(self.window_count)
        return self.tokens.shape[0] // root, self.tokens.shape[1] // root


def init_bev_params(params: ParamSet, c_model: int, depth_bins: int,
                    grid_h: int, grid_w: int, rng: np.random.Generator,
                    dtype=np.float32) -> None:
    params.add("bev.depth.weight", fan_in_init(rng, (c_model, depth_bins), c_model, dtype))
    params.add("bev.depth.bias", np.zeros(depth_bins, dtype=dtype))
    params.add("bev.pos_embedding",
               normal_init(rng, (grid_h, grid_w, c_model), 0.02, dtype))


def predict_depth(c4: Tensor, params: ParamSet) -> DepthField:
    """Fully connected layer + softmax over depth bins, per pixel."""
    logits = T.linear(c4, params["bev.depth.weight"], params["bev.depth.bias"])
    return DepthField(T.softmax(logits, axis=-1))


def lift_to_3d(c4: Tensor, depth: DepthField) -> Tensor:
    """volume[h, w, d, c] = depth[h, w, d] * c4[h, w, c]."""
    h, w, c = c4.shape
    if depth.probs.shape[:2] != (h, w):
        raise ValueError(
            f"depth grid {depth.probs.shape[:2]} does not match features {(h, w)}")
    d = depth.bins
    return T.mul(T.reshape(depth.probs, (h, w, d, 1)), T.reshape(c4, (h, w, 1, c)))


def collapse_height(volume: Tensor) -> Tensor:
    """Max over the image-height axis: (H4, W4, D, C) -> (D, W4, C)."""
    collapsed = T.pool(volume, "max", axis=0)       # (W4, D, C)
    return T.transpose(collapsed, (1, 0, 2))


def resample_to_grid(collapsed: Tensor, grid_h: int, grid_w: int,
                     window_count: int, params: ParamSet) -> BevGrid:
    """Bilinear resample of the depth-by-width plane onto the BEV grid."""
    tokens = T.bilinear_resize(collapsed, grid_h, grid_w)
    tokens = T.add(tokens, params["bev.pos_embedding"])
    return BevGrid(tokens, window_count)


def initialize_grid(c4: Tensor, params: ParamSet, grid_h: int, grid_w: int,
                    window_count: int, enabled: bool = True) -> BevGrid:
    """Full init path; when disabled the tokens are just the positional embedding."""
    if not enabled:
        pos = params["bev.pos_embedding"]
        zeros = Tensor(np.zeros(pos.shape, dtype=pos.data.dtype))
        return BevGrid(T.add(zeros, pos), window_count)
    depth = predict_depth(c4, params)
    collapsed = collapse_height(lift_to_3d(c4, depth))
    return resample_to_grid(collapsed, grid_h, grid_w, window_count, params)
