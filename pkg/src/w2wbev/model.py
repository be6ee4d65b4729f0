"""End-to-end cross-view model tying the branches together.

Ground pipeline: prepare the (possibly FoV-cropped) panorama, extract and
fuse multi-scale features, initialize the BEV grid from depth-lifted
features, run the window-to-window encoder, and embed.  Aerial pipeline:
extract/fuse and embed the top-down map.  Both embeddings live on the
unit sphere in a shared space.

Cropped ground inputs are zero-padded on the right up to a width multiple
of 16 * n_windows so every pyramid level stays divisible into strips; only
uncropped full panoramas are treated as angularly periodic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from w2wbev import backbone, bev_init, encoder, retrieval
from w2wbev.config import RunConfig
from w2wbev.encoder import EncoderConfig, EncodeTrace
from w2wbev.params import ParamSet
from w2wbev.tensor import Tensor


@dataclass
class GroundTrace:
    """Diagnostics captured along one ground forward pass."""

    depth_probs: np.ndarray | None = None       # (H4, W4, D)
    initial_tokens: np.ndarray | None = None    # (H_b, W_b, C)
    final_tokens: np.ndarray | None = None
    encode: EncodeTrace = field(default_factory=EncodeTrace)


class CrossViewModel:
    """Holds the parameter registry and runs both branch pipelines."""

    def __init__(self, config: RunConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.encoder_cfg = EncoderConfig(
            num_blocks=config.num_blocks, num_heads=config.num_heads,
            n_windows=config.n_windows, grid_h=config.grid_h,
            grid_w=config.grid_w, ffn_expansion=config.ffn_expansion,
            bev_init_enabled=config.bev_init_enabled,
        ).validate(config.c_model)
        self.params = ParamSet()
        rng = np.random.default_rng(config.seed)
        backbone.init_branch_params(self.params, "ground", config.c_model, rng, dtype)
        if not config.shared_backbone:
            backbone.init_branch_params(self.params, "aerial", config.c_model, rng, dtype)
        bev_init.init_bev_params(self.params, config.c_model, config.depth_bins,
                                 config.grid_h, config.grid_w, rng, dtype)
        encoder.init_encoder_params(self.params, config.c_model, self.encoder_cfg,
                                    rng, dtype)
        retrieval.init_embed_params(self.params, config.c_model, config.embed_dim,
                                    rng, dtype)

    @property
    def aerial_prefix(self) -> str:
        return "ground" if self.config.shared_backbone else "aerial"

    def prepare_ground(self, pano: np.ndarray) -> tuple[Tensor, bool]:
        """Center pixel values, pad cropped widths, and flag periodicity."""
        x = pano.astype(self.dtype) - np.asarray(0.5, dtype=self.dtype)
        width = x.shape[1]
        periodic = width == self.config.pano_w
        unit = 16 * self.config.n_windows
        if width % unit:
            padded = unit * (width // unit + 1)
            x = np.pad(x, ((0, 0), (0, padded - width), (0, 0)))
        return Tensor(x, dtype=self.dtype), periodic

    def ground_tokens(self, pano: np.ndarray,
                      trace: GroundTrace | None = None) -> Tensor:
        """Panorama (possibly cropped) -> final BEV token grid."""
        image, periodic = self.prepare_ground(pano)
        pyramid = backbone.encode_ground(image, self.params, "ground", periodic)
        c4 = pyramid.levels[3]
        if trace is not None and self.config.bev_init_enabled:
            depth = bev_init.predict_depth(c4, self.params)
            trace.depth_probs = depth.probs.data.copy()
        grid = bev_init.initialize_grid(
            c4, self.params, self.config.grid_h, self.config.grid_w,
            self.config.n_windows, enabled=self.config.bev_init_enabled)
        if trace is not None:
            trace.initial_tokens = grid.tokens.data.copy()
        tokens = encoder.encode(grid, pyramid, self.params, self.encoder_cfg,
                                trace.encode if trace is not None else None)
        if trace is not None:
            trace.final_tokens = tokens.data.copy()
        return tokens

    def ground_embedding(self, pano: np.ndarray) -> Tensor:
        return retrieval.embed_ground(self.ground_tokens(pano), self.params)

    def aerial_map(self, aerial: np.ndarray) -> Tensor:
        x = aerial.astype(self.dtype) - np.asarray(0.5, dtype=self.dtype)
        return backbone.encode_aerial(Tensor(x, dtype=self.dtype), self.params,
                                      self.aerial_prefix)

    def aerial_embedding(self, aerial: np.ndarray) -> Tensor:
        return retrieval.embed_aerial(self.aerial_map(aerial), self.params)
