"""Embedding heads, symmetric InfoNCE, retrieval evaluation, and the optimizer.

Both views map into a shared unit-norm embedding space: spatial tokens are
globally averaged, projected to the embedding dimension, and L2-normalized.
Training pairs them with a temperature-scaled symmetric InfoNCE over
in-batch negatives; evaluation reports recall at top-k and top-1%.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from w2wbev import tensor as T
from w2wbev.config import ConfigError
from w2wbev.params import ParamSet, fan_in_init
from w2wbev.tensor import Tensor


def init_embed_params(params: ParamSet, c_model: int, embed_dim: int,
                      rng: np.random.Generator, dtype=np.float32) -> None:
    for view in ("ground", "aerial"):
        params.add(f"embed.{view}.weight",
                   fan_in_init(rng, (c_model, embed_dim), c_model, dtype))
        params.add(f"embed.{view}.bias", np.zeros(embed_dim, dtype=dtype))


def embed_tokens(tokens: Tensor, params: ParamSet, view: str) -> Tensor:
    """Global average over spatial tokens -> affine -> unit L2 norm."""
    pooled = T.tmean(tokens, axis=(0, 1))
    vec = T.linear(pooled, params[f"embed.{view}.weight"],
                   params[f"embed.{view}.bias"])
    return T.l2_normalize(vec)


def embed_ground(bev_repr: Tensor, params: ParamSet) -> Tensor:
    return embed_tokens(bev_repr, params, "ground")


def embed_aerial(aerial_map: Tensor, params: ParamSet) -> Tensor:
    return embed_tokens(aerial_map, params, "aerial")


def infonce(ground_embs: Tensor, aerial_embs: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE; row i of each side is the matched pair.

    loss = 1/2 [ mean_i CE(sim row i, i) + mean_i CE(sim column i, i) ]
    with sim = G A^T / temperature and in-batch negatives.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    b = ground_embs.shape[0]
    if aerial_embs.shape[0] != b:
        raise ValueError("matched batches must have equal size")
    sim = T.mul(T.matmul(ground_embs, T.transpose(aerial_embs)), 1.0 / temperature)
    eye = Tensor(np.eye(b, dtype=sim.data.dtype))
    row_ce = T.mul(T.tsum(T.mul(T.log_softmax(sim, axis=1), eye)), -1.0 / b)
    col_ce = T.mul(T.tsum(T.mul(T.log_softmax(sim, axis=0), eye)), -1.0 / b)
    return T.mul(T.add(row_ce, col_ce), 0.5)


@dataclass
class RetrievalReport:
    """Recall rates for one query set against one reference set."""

    query_count: int
    reference_count: int
    ks: list[int]
    hits: dict[int, int]
    rates: dict[int, float]
    one_percent_k: int
    ranking: np.ndarray          # (Q, R) reference ids, best first

    def rate(self, k: int) -> float:
        return self.rates[k]

    def to_text(self) -> str:
        lines = [f"queries={self.query_count} references={self.reference_count}",
                 f"{'k':>6} {'hits':>6} {'total':>6} {'rate':>8}"]
        for k in self.ks:
            label = f"{k}*" if k == self.one_percent_k and k not in (1, 5, 10) else str(k)
            lines.append(f"{label:>6} {self.hits[k]:>6} {self.query_count:>6} "
                         f"{self.rates[k]:>8.4f}")
        lines.append("(* = top 1% of references)")
        return "\n".join(lines)

    def to_delimited(self) -> str:
        rows = ["k,hits,total,rate"]
        for k in self.ks:
            rows.append(f"{k},{self.hits[k]},{self.query_count},{self.rates[k]:.6f}")
        return "\n".join(rows) + "\n"


def recall_at_k(ground_embs: np.ndarray, aerial_embs: np.ndarray,
                truth: np.ndarray, ks=(1, 5, 10)) -> RetrievalReport:
    """Rank references per query by descending dot product; ties favor the
    lower reference id.  Adds the top-1% cutoff k = ceil(0.01 * references)."""
    q, r = ground_embs.shape[0], aerial_embs.shape[0]
    truth = np.asarray(truth)
    if truth.shape[0] != q:
        raise ValueError("truth must map every query")
    if truth.min() < 0 or truth.max() >= r:
        raise IndexError(f"truth id out of range [0, {r})")
    sim = ground_embs @ aerial_embs.T
    # stable sort on negated scores keeps lower ids first among ties
    ranking = np.argsort(-sim, axis=1, kind="stable")
    rank_of_truth = np.empty(q, dtype=np.int64)
    for i in range(q):
        rank_of_truth[i] = int(np.nonzero(ranking[i] == truth[i])[0][0])
    one_percent = max(1, math.ceil(0.01 * r))
    all_ks = sorted(set(int(k) for k in ks) | {one_percent})
    hits = {k: int(np.sum(rank_of_truth < k)) for k in all_ks}
    rates = {k: hits[k] / q for k in all_ks}
    return RetrievalReport(q, r, all_ks, hits, rates, one_percent, ranking)


class AdamW:
    """Decoupled weight decay with adaptive moments and a cosine schedule.

    ``lr_at(0)`` is the initial rate and ``lr_at(total_steps)`` equals
    ``min_lr`` exactly; step i (0-indexed) applies ``lr_at(i)``.
    """

    def __init__(self, params: ParamSet, lr: float, min_lr: float,
                 total_steps: int, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr <= 0 or min_lr < 0 or min_lr > lr:
            raise ConfigError("AdamW needs 0 < lr and 0 <= min_lr <= lr")
        self.params = params
        self.lr = lr
        self.min_lr = min_lr
        self.total_steps = max(total_steps, 1)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def lr_at(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1 + math.cos(math.pi * frac))

    def step(self) -> float:
        lr_t = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= lr_t * (mhat / (np.sqrt(vhat) + self.eps)
                              + self.weight_decay * p.data)
        return lr_t

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.float64)}
        for name in self.params.names():
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.t"][0])
        for name in self.params.names():
            self.m[name][...] = arrays[f"opt.m.{name}"]
            self.v[name][...] = arrays[f"opt.v.{name}"]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries a parameter-norm dump for diagnosis."""

    def __init__(self, loss_value: float, params: ParamSet):
        self.norms = {name: float(np.linalg.norm(p.data)) for name, p in params.items()}
        worst = sorted(self.norms.items(), key=lambda kv: -kv[1])[:5]
        dump = ", ".join(f"{n}={v:.3e}" for n, v in worst)
        super().__init__(f"non-finite loss {loss_value}; largest parameter norms: {dump}")


def train_step(model, batch, optimizer: AdamW, temperature: float,
               rng: np.random.Generator, fov: float) -> float:
    """One optimization step over a batch of rendered pairs.

    Panoramas are augmented (random roll, FoV crop) with the supplied rng;
    both branches are embedded, the symmetric InfoNCE is backpropagated,
    and the decoupled-weight-decay update runs under the cosine schedule.
    """
    from w2wbev.world import augment

    model.params.zero_grad()
    ground_rows, aerial_rows = [], []
    for pair in batch:
        cropped, _ = augment(pair.pano, fov, rng)
        ground_rows.append(model.ground_embedding(cropped))
        aerial_rows.append(model.aerial_embedding(pair.aerial))
    g = T.stack(ground_rows, axis=0)
    a = T.stack(aerial_rows, axis=0)
    loss = infonce(g, a, temperature)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(value, model.params)
    loss.backward()
    optimizer.step()
    return value
