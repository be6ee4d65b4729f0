"""Window partitioning and context-aware window-to-window matching.

BEV tokens are tiled into a sqrt(N) x sqrt(N) grid of windows (row-major);
each ground level is sliced into N equal-width vertical strips.  Every BEV
window is assigned, per level, the strip whose pooled descriptor has the
highest dot product with the window's pooled descriptor.  The assignment
is a hard argmax computed outside the gradient tape; gradients flow only
through the attention that consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from w2wbev import tensor as T
from w2wbev.backbone import Pyramid
from w2wbev.bev_init import BevGrid
from w2wbev.config import ConfigError
from w2wbev.tensor import Tensor

LEVEL_COUNT = 4


@dataclass
class WindowView:
    """One window: its index, 3-D block, and flattened token view."""

    index: int
    block: Tensor               # (h, w, C)
    tokens: Tensor              # (h*w, C)


@dataclass
class WindowSet:
    windows: list[WindowView]
    source: str                 # "bev" | "ground"
    level: int | None = None    # 1..4 for ground sets

    def __len__(self) -> int:
        return len(self.windows)

    def descriptors(self) -> np.ndarray:
        """Per-window global-average-pooled feature vectors, detached."""
        return np.stack([w.tokens.data.mean(axis=0) for w in self.windows])


@dataclass
class WindowAssignment:
    """match[i, l-1] = ground strip index for BEV window i at level l."""

    match: np.ndarray           # (N, 4) int
    scores: np.ndarray          # (4, N, N) float


def partition_bev(grid: BevGrid) -> WindowSet:
    """Tile the grid row-major into window_count equal blocks."""
    root = math.isqrt(grid.window_count)
    wh, ww = grid.window_dims
    views = []
    for i in range(grid.window_count):
        r, c = divmod(i, root)
        block = grid.tokens[r * wh:(r + 1) * wh, c * ww:(c + 1) * ww, :]
        views.append(WindowView(i, block, T.reshape(block, (wh * ww, block.shape[-1]))))
    return WindowSet(views, "bev")


def partition_ground(pyramid: Pyramid, n: int) -> list[WindowSet]:
    """Slice each level into n equal-width vertical strips, left to right."""
    sets = []
    for level, fmap in enumerate(pyramid.levels, start=1):
        h, w, c = fmap.shape
        if w % n:
            raise ConfigError(
                f"ground level {level} width {w} is not divisible by {n} windows")
        sw = w // n
        views = []
        for j in range(n):
            block = fmap[:, j * sw:(j + 1) * sw, :]
            views.append(WindowView(j, block, T.reshape(block, (h * sw, c))))
        sets.append(WindowSet(views, "ground", level))
    return sets


def reassemble_bev(blocks: list[Tensor], window_count: int) -> Tensor:
    """Inverse of partition_bev on the block views (differentiable)."""
    root = math.isqrt(window_count)
    rows = [T.concat(blocks[r * root:(r + 1) * root], axis=1) for r in range(root)]
    return T.concat(rows, axis=0)


def match_windows(bev: WindowSet, grounds: list[WindowSet]) -> WindowAssignment:
    """Assign every (BEV window, level) its highest-scoring ground strip.

    Scores are dot products of global-average-pooled descriptors; argmax
    ties break to the lowest strip index.  Pure numpy: the selection is
    detached from the gradient tape by design.
    """
    n = len(bev)
    if any(len(g) != n for g in grounds):
        raise ValueError("BEV and ground partitions must agree on window count")
    bev_desc = bev.descriptors()                        # (N, C)
    scores = np.zeros((LEVEL_COUNT, n, n), dtype=np.float64)
    for li, gset in enumerate(grounds):
        scores[li] = bev_desc @ gset.descriptors().T    # (N bev, N ground)
    match = scores.argmax(axis=2).T.astype(np.int64)    # (N, 4); first max wins
    return WindowAssignment(match=match, scores=scores)
