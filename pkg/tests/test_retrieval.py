"""Embedding heads, InfoNCE loss, recall evaluation, and the optimizer."""

import numpy as np
import pytest

from w2wbev import retrieval
from w2wbev import tensor as T
from w2wbev.config import ConfigError
from w2wbev.params import ParamSet
from w2wbev.tensor import Tensor

C, E = 8, 6


def make_params(seed=0):
    ps = ParamSet()
    retrieval.init_embed_params(ps, C, E, np.random.default_rng(seed))
    return ps


class TestEmbedding:
    def test_constant_grid_matches_scalar_path(self):
        ps = make_params()
        c = 0.7
        tokens = Tensor(np.full((4, 4, C), c, dtype=np.float32))
        emb = retrieval.embed_ground(tokens, ps)
        vec = c * ps["embed.ground.weight"].data.sum(axis=0) + ps["embed.ground.bias"].data
        np.testing.assert_allclose(emb.data, vec / (np.linalg.norm(vec) + 1e-8),
                                   rtol=1e-4, atol=1e-6)

    def test_proportional_inputs_identical_embeddings(self):
        """L2 normalization is scale invariant (with zero bias)."""
        ps = make_params(seed=1)
        ps["embed.ground.bias"].data[...] = 0.0
        rng = np.random.default_rng(2)
        tokens = rng.standard_normal((4, 4, C)).astype(np.float32)
        a = retrieval.embed_ground(Tensor(tokens), ps)
        b = retrieval.embed_ground(Tensor(3.0 * tokens), ps)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_unit_norm(self):
        ps = make_params(seed=3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            emb = retrieval.embed_aerial(
                Tensor(rng.standard_normal((6, 6, C)).astype(np.float32)), ps)
            assert np.linalg.norm(emb.data) == pytest.approx(1.0, abs=1e-6)

    def test_zero_input_is_safe(self):
        ps = make_params(seed=5)
        ps["embed.ground.bias"].data[...] = 0.0
        emb = retrieval.embed_ground(Tensor(np.zeros((4, 4, C), dtype=np.float32)), ps)
        assert np.all(np.isfinite(emb.data))

    def test_seeded_vs_scalar_oracle(self):
        ps = make_params(seed=6)
        rng = np.random.default_rng(7)
        tokens = rng.standard_normal((3, 5, C)).astype(np.float32)
        emb = retrieval.embed_ground(Tensor(tokens), ps)
        pooled = tokens.reshape(-1, C).mean(axis=0)
        vec = pooled @ ps["embed.ground.weight"].data + ps["embed.ground.bias"].data
        np.testing.assert_allclose(emb.data, vec / (np.linalg.norm(vec) + 1e-8),
                                   rtol=1e-4, atol=1e-6)


def unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestInfoNCE:
    def test_single_pair_loss_is_zero(self):
        rng = np.random.default_rng(8)
        g = Tensor(unit_rows(rng, (1, E)), dtype=np.float64)
        a = Tensor(unit_rows(rng, (1, E)), dtype=np.float64)
        loss = retrieval.infonce(g, a, temperature=0.05)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_embeddings_give_log_batch(self):
        b = 5
        row = unit_rows(np.random.default_rng(9), (1, E))
        g = Tensor(np.repeat(row, b, axis=0), dtype=np.float64)
        loss = retrieval.infonce(g, g, temperature=0.05)
        assert loss.item() == pytest.approx(np.log(b), abs=1e-6)

    def test_seeded_b4_vs_direct_scalar_reference(self):
        rng = np.random.default_rng(10)
        g = unit_rows(rng, (4, E))
        a = unit_rows(rng, (4, E))
        tau = 0.05
        sim = g @ a.T / tau
        total = 0.0
        for i in range(4):
            row = sim[i]
            total += -(row[i] - np.log(np.exp(row - row.max()).sum()) - row.max())
            col = sim[:, i]
            total += -(col[i] - np.log(np.exp(col - col.max()).sum()) - col.max())
        expected = total / (2 * 4)
        loss = retrieval.infonce(Tensor(g, dtype=np.float64),
                                 Tensor(a, dtype=np.float64), tau)
        assert loss.item() == pytest.approx(expected, rel=1e-10)

    def test_loss_is_nonnegative(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            g = Tensor(unit_rows(rng, (6, E)), dtype=np.float64)
            a = Tensor(unit_rows(rng, (6, E)), dtype=np.float64)
            assert retrieval.infonce(g, a, 0.05).item() >= 0.0

    def test_invariant_under_joint_rotation(self):
        """Applying one orthogonal transform to both sides preserves the loss."""
        rng = np.random.default_rng(11)
        g = unit_rows(rng, (5, E))
        a = unit_rows(rng, (5, E))
        q, _ = np.linalg.qr(rng.standard_normal((E, E)))
        base = retrieval.infonce(Tensor(g, dtype=np.float64),
                                 Tensor(a, dtype=np.float64), 0.05).item()
        rotated = retrieval.infonce(Tensor(g @ q, dtype=np.float64),
                                    Tensor(a @ q, dtype=np.float64), 0.05).item()
        assert rotated == pytest.approx(base, abs=1e-5)

    def test_gradient_check(self):
        rng = np.random.default_rng(12)
        g = Tensor(unit_rows(rng, (3, E)), requires_grad=True, dtype=np.float64)
        a = Tensor(unit_rows(rng, (3, E)), requires_grad=True, dtype=np.float64)
        report = T.grad_check(lambda x, y: retrieval.infonce(x, y, 0.5), [g, a],
                              name="infonce")
        assert report.passed, report.summary()

    def test_nonpositive_temperature_rejected(self):
        g = Tensor(np.zeros((2, E)))
        with pytest.raises(ConfigError, match="temperature"):
            retrieval.infonce(g, g, 0.0)


def brute_force_report(g, a, truth, ks):
    """Oracle: sort each query's scores descending (lower id wins ties)."""
    sim = g @ a.T
    hits = {k: 0 for k in ks}
    for i in range(g.shape[0]):
        order = sorted(range(a.shape[0]), key=lambda j: (-sim[i, j], j))
        rank = order.index(int(truth[i]))
        for k in ks:
            if rank < k:
                hits[k] += 1
    return hits


class TestRecallAtK:
    def test_identical_sets_perfect_recall(self):
        rng = np.random.default_rng(13)
        g = unit_rows(rng, (8, E))
        report = retrieval.recall_at_k(g, g, np.arange(8))
        assert report.rate(1) == 1.0

    def test_orthogonal_truth_misses(self):
        g = np.zeros((1, 3))
        g[0, 0] = 1.0
        refs = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.9, 0.1, 0.0]])
        report = retrieval.recall_at_k(g, refs, np.array([0]), ks=(1,))
        assert report.rate(1) == 0.0

    def test_100_seeded_tables_vs_brute_force_oracle(self):
        for seed in range(100):
            rng = np.random.default_rng(3000 + seed)
            g = rng.standard_normal((10, E))
            a = rng.standard_normal((10, E))
            truth = rng.integers(0, 10, size=10)
            report = retrieval.recall_at_k(g, a, truth, ks=(1, 5, 10))
            oracle = brute_force_report(g, a, truth, report.ks)
            assert report.hits == oracle, seed

    def test_ties_prefer_lower_reference_id(self):
        g = np.array([[1.0, 0.0]])
        a = np.array([[1.0, 0.0], [1.0, 0.0]])     # identical scores
        report = retrieval.recall_at_k(g, a, np.array([1]), ks=(1,))
        assert report.rate(1) == 0.0               # id 0 outranks id 1
        report = retrieval.recall_at_k(g, a, np.array([0]), ks=(1,))
        assert report.rate(1) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(14)
        g = rng.standard_normal((20, E))
        a = rng.standard_normal((30, E))
        truth = rng.integers(0, 30, size=20)
        report = retrieval.recall_at_k(g, a, truth, ks=(1, 5, 10))
        rates = [report.rate(k) for k in sorted(report.ks)]
        assert all(x <= y for x, y in zip(rates, rates[1:]))
        assert rates[-1] <= 1.0

    def test_scale_invariance_of_ranking(self):
        rng = np.random.default_rng(15)
        g = rng.standard_normal((10, E))
        a = rng.standard_normal((12, E))
        truth = rng.integers(0, 12, size=10)
        r1 = retrieval.recall_at_k(g, a, truth)
        r2 = retrieval.recall_at_k(7.5 * g, a, truth)
        assert r1.rates == r2.rates

    def test_one_percent_k(self):
        rng = np.random.default_rng(16)
        g = rng.standard_normal((5, E))
        a = rng.standard_normal((250, E))
        report = retrieval.recall_at_k(g, a, np.arange(5))
        assert report.one_percent_k == 3            # ceil(0.01 * 250)

    def test_truth_out_of_range(self):
        g = np.zeros((2, E))
        with pytest.raises(IndexError):
            retrieval.recall_at_k(g, g, np.array([0, 5]))

    def test_report_serialization(self):
        rng = np.random.default_rng(17)
        g = unit_rows(rng, (4, E))
        report = retrieval.recall_at_k(g, g, np.arange(4))
        text = report.to_text()
        assert "queries=4" in text
        csv = report.to_delimited()
        assert csv.splitlines()[0] == "k,hits,total,rate"
        assert len(csv.splitlines()) == 1 + len(report.ks)


class TestAdamW:
    def make_paramset(self, seed=0):
        ps = ParamSet()
        rng = np.random.default_rng(seed)
        ps.add("w", rng.standard_normal((3, 3)).astype(np.float32))
        ps.add("b", rng.standard_normal(3).astype(np.float32))
        return ps

    def run_steps(self, ps, n):
        opt = retrieval.AdamW(ps, lr=1e-2, min_lr=1e-4, total_steps=n)
        for _ in range(n):
            for _, p in ps.items():
                loss = T.tsum(T.mul(p, p))
                loss.backward()
            opt.step()
            ps.zero_grad()
        return opt

    def test_identical_runs_produce_identical_parameters(self):
        ps1, ps2 = self.make_paramset(), self.make_paramset()
        self.run_steps(ps1, 5)
        self.run_steps(ps2, 5)
        for (_, a), (_, b) in zip(ps1.items(), ps2.items()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_learning_rate_at_schedule_end_is_min_lr(self):
        opt = retrieval.AdamW(self.make_paramset(), lr=1e-2, min_lr=1e-4,
                              total_steps=50)
        assert opt.lr_at(0) == pytest.approx(1e-2)
        assert opt.lr_at(50) == pytest.approx(1e-4)
        assert opt.lr_at(25) == pytest.approx((1e-2 + 1e-4) / 2)

    def test_weight_decay_shrinks_unused_parameters(self):
        ps = self.make_paramset()
        before = np.abs(ps["w"].data).sum()
        opt = retrieval.AdamW(ps, lr=1e-2, min_lr=1e-2, total_steps=10,
                              weight_decay=0.1)
        for _ in range(10):
            opt.step()      # zero gradients: pure decay
        assert np.abs(ps["w"].data).sum() < before

    def test_state_roundtrip(self):
        ps = self.make_paramset()
        opt = self.run_steps(ps, 3)
        arrays = {k: v.copy() for k, v in opt.state_arrays().items()}
        opt2 = retrieval.AdamW(ps, lr=1e-2, min_lr=1e-4, total_steps=3)
        opt2.load_state_arrays(arrays)
        assert opt2.t == opt.t
        for name in ps.names():
            np.testing.assert_array_equal(opt2.m[name], opt.m[name])
