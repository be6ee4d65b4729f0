"""Stacked BEV encoder blocks.

Each block recomputes the window assignment from the current BEV tokens,
then applies three sublayers: window-to-window multi-head cross-attention
(queries from a BEV window, keys/values from its matched ground strip,
summed over the four scales), global multi-head self-attention over all
BEV tokens, and a per-token feed-forward transform.  Every sublayer is
wrapped in a residual connection and layer normalization; attention scores
are scaled by the per-head dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from w2wbev import tensor as T
from w2wbev import windows as W
from w2wbev.backbone import Pyramid
from w2wbev.bev_init import BevGrid
from w2wbev.config import ConfigError
from w2wbev.params import ParamSet, fan_in_init
from w2wbev.tensor import Tensor


@dataclass
class EncoderConfig:
    num_blocks: int = 3
    num_heads: int = 4
    n_windows: int = 4
    grid_h: int = 16
    grid_w: int = 16
    ffn_expansion: int = 4
    bev_init_enabled: bool = True

    def validate(self, c_model: int) -> "EncoderConfig":
        if c_model % self.num_heads:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide c_model {c_model}")
        root = math.isqrt(self.n_windows)
        if root * root != self.n_windows:
            raise ConfigError(f"n_windows {self.n_windows} must be a perfect square")
        if self.grid_h % root or self.grid_w % root:
            raise ConfigError(
                f"sqrt(n_windows) {root} must divide grid dims "
                f"({self.grid_h}, {self.grid_w})")
        return self


@dataclass
class AttentionWeights:
    """Fused per-head projections: column blocks of wq/wk/wv are the heads."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int

    @classmethod
    def from_params(cls, params: ParamSet, prefix: str, num_heads: int):
        return cls(params[f"{prefix}.wq"], params[f"{prefix}.wk"],
                   params[f"{prefix}.wv"], params[f"{prefix}.wo"], num_heads)


@dataclass
class EncodeTrace:
    """Optional per-block diagnostics captured during encoding."""

    assignments: list = field(default_factory=list)   # (N, 4) int arrays
    score_tables: list = field(default_factory=list)  # (4, N, N) float arrays
    cross_attention: list = field(default_factory=list)  # per block: {(window, level): (nq, nk)}
    self_attention: list = field(default_factory=list)   # per block: (nq, nk)


def init_encoder_params(params: ParamSet, c_model: int, cfg: EncoderConfig,
                        rng: np.random.Generator, dtype=np.float32) -> None:
    hidden = c_model * cfg.ffn_expansion
    for b in range(cfg.num_blocks):
        for kind in ("cross", "self"):
            for name in ("wq", "wk", "wv", "wo"):
                params.add(f"enc{b}.{kind}.{name}",
                           fan_in_init(rng, (c_model, c_model), c_model, dtype))
            params.add(f"enc{b}.{kind}.ln.gain", np.ones(c_model, dtype=dtype))
            params.add(f"enc{b}.{kind}.ln.bias", np.zeros(c_model, dtype=dtype))
        params.add(f"enc{b}.ffn.w1", fan_in_init(rng, (c_model, hidden), c_model, dtype))
        params.add(f"enc{b}.ffn.b1", np.zeros(hidden, dtype=dtype))
        params.add(f"enc{b}.ffn.w2", fan_in_init(rng, (hidden, c_model), hidden, dtype))
        params.add(f"enc{b}.ffn.b2", np.zeros(c_model, dtype=dtype))
        params.add(f"enc{b}.ffn.ln.gain", np.ones(c_model, dtype=dtype))
        params.add(f"enc{b}.ffn.ln.bias", np.zeros(c_model, dtype=dtype))


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor,
                         weights: AttentionWeights,
                         attn_sink: list | None = None) -> Tensor:
    """softmax(QK^T / sqrt(d_head)) V per head, concatenated and projected."""
    if kv_tokens.shape[0] == 0:
        raise ValueError("attention requires a non-empty key/value set")
    c = q_tokens.shape[-1]
    h = weights.num_heads
    d = c // h
    scale = 1.0 / math.sqrt(d)
    q = T.matmul(q_tokens, weights.wq)
    k = T.matmul(kv_tokens, weights.wk)
    v = T.matmul(kv_tokens, weights.wv)
    heads = []
    for i in range(h):
        cols = slice(i * d, (i + 1) * d)
        scores = T.mul(T.matmul(q[:, cols], T.transpose(k[:, cols])), scale)
        attn = T.softmax(scores, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        heads.append(T.matmul(attn, v[:, cols]))
    return T.matmul(T.concat(heads, axis=1), weights.wo)


def _sublayer_norm(x: Tensor, delta: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return T.layernorm(T.add(x, delta), params[f"{prefix}.gain"],
                       params[f"{prefix}.bias"])


def w2w_cross_attention(bev_set: W.WindowSet, ground_sets: list[W.WindowSet],
                        assignment: W.WindowAssignment, params: ParamSet,
                        block: int, num_heads: int,
                        trace: dict | None = None) -> list[Tensor]:
    """Per BEV window: attend to the matched strip at each level, sum, add, norm.

    Returns the list of updated window blocks in partition order.
    """
    weights = AttentionWeights.from_params(params, f"enc{block}.cross", num_heads)
    n = len(bev_set)
    out_blocks = []
    for i, view in enumerate(bev_set.windows):
        x = view.tokens
        total = None
        for li, gset in enumerate(ground_sets):
            j = int(assignment.match[i, li])
            if not 0 <= j < n:
                raise AssertionError(
                    f"assignment index {j} out of range for {n} strips")
            sink = [] if trace is not None else None
            att = multi_head_attention(x, gset.windows[j].tokens, weights, sink)
            if trace is not None:
                trace[(i, li)] = np.mean(sink, axis=0)
            total = att if total is None else T.add(total, att)
        y = _sublayer_norm(x, total, params, f"enc{block}.cross.ln")
        wh, ww = view.block.shape[0], view.block.shape[1]
        out_blocks.append(T.reshape(y, (wh, ww, y.shape[-1])))
    return out_blocks


def bev_self_attention(tokens: Tensor, params: ParamSet, block: int,
                       num_heads: int, attn_sink: list | None = None) -> Tensor:
    """Global interaction: every BEV token attends to all BEV tokens."""
    hb, wb, c = tokens.shape
    flat = T.reshape(tokens, (hb * wb, c))
    weights = AttentionWeights.from_params(params, f"enc{block}.self", num_heads)
    att = multi_head_attention(flat, flat, weights, attn_sink)
    y = _sublayer_norm(flat, att, params, f"enc{block}.self.ln")
    return T.reshape(y, (hb, wb, c))


def ffn(tokens: Tensor, params: ParamSet, block: int) -> Tensor:
    """Per-token affine -> relu -> affine with residual and layer norm."""
    hb, wb, c = tokens.shape
    flat = T.reshape(tokens, (hb * wb, c))
    hidden = T.relu(T.linear(flat, params[f"enc{block}.ffn.w1"],
                             params[f"enc{block}.ffn.b1"]))
    delta = T.linear(hidden, params[f"enc{block}.ffn.w2"],
                     params[f"enc{block}.ffn.b2"])
    y = _sublayer_norm(flat, delta, params, f"enc{block}.ffn.ln")
    return T.reshape(y, (hb, wb, c))


def encode(grid: BevGrid, pyramid: Pyramid, params: ParamSet,
           cfg: EncoderConfig, trace: EncodeTrace | None = None) -> Tensor:
    """Run the full block stack; the assignment is recomputed every block."""
    tokens = grid.tokens
    n = grid.window_count
    ground_sets = W.partition_ground(pyramid, n)
    for b in range(cfg.num_blocks):
        bev_set = W.partition_bev(BevGrid(tokens, n))
        assignment = W.match_windows(bev_set, ground_sets)
        cross_trace = {} if trace is not None else None
        blocks = w2w_cross_attention(bev_set, ground_sets, assignment, params,
                                     b, cfg.num_heads, cross_trace)
        tokens = W.reassemble_bev(blocks, n)
        self_sink = [] if trace is not None else None
        tokens = bev_self_attention(tokens, params, b, cfg.num_heads, self_sink)
        tokens = ffn(tokens, params, b)
        if trace is not None:
            trace.assignments.append(assignment.match.copy())
            trace.score_tables.append(assignment.scores.copy())
            trace.cross_attention.append(cross_trace)
            trace.self_attention.append(np.mean(self_sink, axis=0))
    return tokens
