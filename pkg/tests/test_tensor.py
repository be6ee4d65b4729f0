"""Tensor op semantics, backward rules, and the finite-difference oracle."""

import numpy as np
import pytest

from w2wbev import tensor as T
from w2wbev.tensor import ShapeError, Tensor


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad,
                  dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_projector_row_selection(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        m = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(p, m)
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_seeded_vs_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        # independent scalar oracle: explicit triple loop
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        got = T.matmul(t64(a), t64(b))
        np.testing.assert_allclose(got.data, expected, rtol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_magnitude_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_seeded_vs_scalar_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x)
        expected = e / e.sum()
        got = T.softmax(t64(x))
        np.testing.assert_allclose(got.data, expected, rtol=1e-12)

    def test_rows_sum_to_one_even_at_magnitude_1e3(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            x = Tensor(rng.uniform(-1e3, 1e3, size=(4, 7)))
            s = T.softmax(x, axis=1)
            np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(s.data >= 0)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), axis=3)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((5, 6, 3)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = np.eye(3)
        out = T.conv2d(x, Tensor(k), stride=1)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_all_ones_kernel_constant_field(self):
        c = 2.5
        x = Tensor(np.full((4, 8, 1), c))
        k = Tensor(np.ones((3, 3, 1, 1)))
        out = T.conv2d(x, k, stride=1, padding_mode="circular_width")
        # interior rows see the full 3x3 receptive field: value 9c
        np.testing.assert_allclose(out.data[1:-1], 9 * c, rtol=1e-6)
        # top/bottom rows lose one zero-padded row: 6c
        np.testing.assert_allclose(out.data[0], 6 * c, rtol=1e-6)

    def test_seeded_vs_six_nested_loop_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((8, 8, 2))
        k = rng.standard_normal((3, 3, 2, 1))

        def oracle(x, k, stride, circular):
            H, W, cin = x.shape
            kk = k.shape[0]
            p = kk // 2
            oh = -(-H // stride)
            ow = -(-W // stride)
            out = np.zeros((oh, ow, k.shape[3]))
            for oi in range(oh):
                for oj in range(ow):
                    for di in range(kk):
                        for dj in range(kk):
                            ii = oi * stride + di - p
                            jj = oj * stride + dj - p
                            if ii < 0 or ii >= H:
                                continue
                            if circular:
                                jj = jj % W
                            elif jj < 0 or jj >= W:
                                continue
                            for ci in range(cin):
                                for co in range(k.shape[3]):
                                    out[oi, oj, co] += x[ii, jj, ci] * k[di, dj, ci, co]
            return out

        for stride in (1, 2):
            for mode in ("zero", "circular_width"):
                got = T.conv2d(t64(x), t64(k), stride=stride, padding_mode=mode)
                expected = oracle(x, k, stride, mode == "circular_width")
                np.testing.assert_allclose(got.data, expected, rtol=1e-10,
                                           err_msg=f"stride={stride} mode={mode}")

    def test_circular_shift_equivariance_exact(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 12, 2))
        k = t64(rng.standard_normal((3, 3, 2, 4)))
        base = T.conv2d(t64(x), k, stride=1, padding_mode="circular_width").data
        for s in (1, 3, 7):
            shifted = T.conv2d(t64(np.roll(x, s, axis=1)), k, stride=1,
                               padding_mode="circular_width").data
            np.testing.assert_array_equal(shifted, np.roll(base, s, axis=1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))))


class TestPool:
    def test_max_over_length_one_axis(self):
        x = Tensor(np.arange(6.0).reshape(1, 2, 3))
        out = T.pool(x, "max", axis=0)
        np.testing.assert_array_equal(out.data, x.data[0])

    def test_global_avg(self):
        out = T.pool(Tensor([[1.0, 3.0], [5.0, 7.0]]), "global_avg")
        assert out.item() == pytest.approx(4.0)

    def test_seeded_max_vs_scan_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((4, 6, 3))
        expected = np.full((6, 3), -np.inf)
        for i in range(4):
            for j in range(6):
                for c in range(3):
                    if x[i, j, c] > expected[j, c]:
                        expected[j, c] = x[i, j, c]
        got = T.pool(t64(x), "max", axis=0)
        np.testing.assert_array_equal(got.data, expected)

    def test_max_tie_routes_to_lowest_flat_index(self):
        x = t64(np.array([[2.0], [2.0], [1.0]]), requires_grad=True)
        out = T.pool(x, "max", axis=0)
        T.tsum(out).backward()
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_avg_window(self):
        x = Tensor(np.arange(16.0).reshape(4, 4, 1))
        out = T.pool(x, "avg", window=(2, 2))
        np.testing.assert_allclose(out.data[..., 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_empty_extent_rejected(self):
        with pytest.raises(ShapeError):
            T.pool(Tensor(np.zeros((0, 2))), "max", axis=0)


class TestUpsample2x:
    def test_single_pixel(self):
        out = T.upsample2x(Tensor(np.full((1, 1, 3), 7.0)))
        np.testing.assert_array_equal(out.data, np.full((2, 2, 3), 7.0))

    def test_row_duplication(self):
        out = T.upsample2x(Tensor(np.array([[1.0, 2.0]]).reshape(1, 2, 1)))
        np.testing.assert_array_equal(out.data[..., 0],
                                      [[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]])

    def test_avg_downsample_is_exact_inverse(self):
        rng = np.random.default_rng(5)
        x = t64(rng.standard_normal((3, 5, 2)))
        back = T.pool(T.upsample2x(x), "avg", window=(2, 2))
        np.testing.assert_array_equal(back.data, x.data)


class TestLinear:
    def test_identity_weight_zero_bias(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 3)))
        out = T.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_zero_weight_broadcasts_bias(self):
        x = Tensor(np.ones((2, 5, 3)))
        b = np.array([1.0, -2.0])
        out = T.linear(x, Tensor(np.zeros((3, 2))), Tensor(b))
        np.testing.assert_allclose(out.data, np.broadcast_to(b, (2, 5, 2)), rtol=1e-6)

    def test_seeded_vs_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 2))
        b = rng.standard_normal(2)
        expected = np.zeros((4, 2))
        for i in range(4):
            for j in range(2):
                expected[i, j] = b[j]
                for k in range(3):
                    expected[i, j] += x[i, k] * w[k, j]
        got = T.linear(t64(x), t64(w), t64(b))
        np.testing.assert_allclose(got.data, expected, rtol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError, match="last dim 3"):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestBilinearResize:
    def test_identity_when_sizes_match(self):
        rng = np.random.default_rng(2)
        x = t64(rng.standard_normal((5, 7, 3)))
        out = T.bilinear_resize(x, 5, 7)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_constants_preserved(self):
        x = Tensor(np.full((3, 4, 2), 1.75))
        out = T.bilinear_resize(x, 9, 5)
        np.testing.assert_allclose(out.data, 1.75, rtol=1e-6)

    def test_seeded_vs_direct_interpolation_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 6, 2))
        oh, ow = 7, 3
        expected = np.zeros((oh, ow, 2))
        for i in range(oh):
            for j in range(ow):
                si = i * (4 - 1) / (oh - 1)
                sj = j * (6 - 1) / (ow - 1)
                i0, j0 = int(np.floor(si)), int(np.floor(sj))
                i1, j1 = min(i0 + 1, 3), min(j0 + 1, 5)
                fi, fj = si - i0, sj - j0
                expected[i, j] = ((1 - fi) * (1 - fj) * x[i0, j0]
                                  + (1 - fi) * fj * x[i0, j1]
                                  + fi * (1 - fj) * x[i1, j0]
                                  + fi * fj * x[i1, j1])
        got = T.bilinear_resize(t64(x), oh, ow)
        np.testing.assert_allclose(got.data, expected, rtol=1e-10)


class TestBackwardSemantics:
    def test_accumulation_doubles_on_second_backward(self):
        x = t64([1.0, 2.0, 3.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_shared_subexpression_accumulates(self):
        x = t64([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), T.mul(x, 3.0))   # x^2 + 3x -> dy/dx = 2x + 3
        y.backward(np.ones(1))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_suppresses_recording(self):
        x = t64([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y._backward is None and not y.requires_grad

    def test_getitem_scatters_gradient(self):
        x = t64(np.arange(12.0).reshape(3, 4), requires_grad=True)
        T.tsum(x[1:, :2]).backward()
        expected = np.zeros((3, 4))
        expected[1:, :2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)


class TestGradCheck:
    def test_quadratic_exact(self):
        x = t64([1.0, 2.0], requires_grad=True)
        report = T.grad_check(lambda t: T.tsum(T.mul(t, t)), [x], h=1e-4, tol=1e-6,
                              name="sum_of_squares")
        assert report.passed
        # analytic gradient is [2, 4]; recompute to confirm the AD side
        y = T.tsum(T.mul(x, x))
        y.backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_softmax_sum_is_constant(self):
        x = t64([0.3, -1.2, 0.8])
        report = T.grad_check(lambda t: T.tsum(T.softmax(t)), [x], name="softmax_sum")
        assert report.passed
        assert report.max_rel_err <= 1e-6

    def test_nonfinite_flagged(self):
        x = t64([1.0])
        report = T.grad_check(lambda t: T.log(T.sub(t, 1.0)), [x], name="log_zero")
        assert not report.finite
        assert not report.passed

    def test_fault_injection_detected(self):
        x = t64(np.random.default_rng(4).standard_normal(6))
        T.set_backward_fault(True)
        try:
            report = T.grad_check(lambda t: T.tsum(T.relu(t)), [x], name="relu_bad")
        finally:
            T.set_backward_fault(False)
        assert not report.passed


DIFFERENTIABLE_OPS = {
    "matmul": lambda rng: (
        lambda a, b: T.matmul(a, b),
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
    ),
    "softmax": lambda rng: (
        lambda x: T.softmax(x, axis=1),
        [rng.standard_normal((3, 5))],
    ),
    "log_softmax": lambda rng: (
        lambda x: T.log_softmax(x, axis=0),
        [rng.standard_normal((4, 3))],
    ),
    "conv2d_zero": lambda rng: (
        lambda x, k: T.conv2d(x, k, stride=2, padding_mode="zero"),
        [rng.standard_normal((5, 6, 2)), rng.standard_normal((3, 3, 2, 2))],
    ),
    "conv2d_circular": lambda rng: (
        lambda x, k: T.conv2d(x, k, stride=1, padding_mode="circular_width"),
        [rng.standard_normal((4, 6, 2)), rng.standard_normal((3, 3, 2, 1))],
    ),
    "pool_max": lambda rng: (
        lambda x: T.pool(x, "max", axis=0),
        [rng.standard_normal((4, 3, 2))],
    ),
    "pool_avg": lambda rng: (
        lambda x: T.pool(x, "avg", window=(2, 2)),
        [rng.standard_normal((4, 6, 2))],
    ),
    "pool_global_avg": lambda rng: (
        lambda x: T.pool(x, "global_avg"),
        [rng.standard_normal((3, 4))],
    ),
    "upsample2x": lambda rng: (
        lambda x: T.upsample2x(x),
        [rng.standard_normal((3, 4, 2))],
    ),
    "linear": lambda rng: (
        lambda x, w, b: T.linear(x, w, b),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)),
         rng.standard_normal(5)],
    ),
    "layernorm": lambda rng: (
        lambda x, g, b: T.layernorm(x, g, b),
        [rng.standard_normal((4, 6)), rng.standard_normal(6),
         rng.standard_normal(6)],
    ),
    "l2_normalize": lambda rng: (
        lambda x: T.l2_normalize(x),
        [rng.standard_normal(7)],
    ),
    "bilinear_resize": lambda rng: (
        lambda x: T.bilinear_resize(x, 5, 3),
        [rng.standard_normal((3, 6, 2))],
    ),
    "relu": lambda rng: (
        lambda x: T.relu(x),
        [rng.standard_normal((4, 4)) + 0.05],   # keep away from the kink
    ),
    "concat": lambda rng: (
        lambda a, b: T.concat([a, b], axis=1),
        [rng.standard_normal((3, 2)), rng.standard_normal((3, 4))],
    ),
    "slice": lambda rng: (
        lambda x: x[1:3, ::2],
        [rng.standard_normal((4, 6))],
    ),
}


@pytest.mark.parametrize("op_name", sorted(DIFFERENTIABLE_OPS))
def test_gradients_match_central_differences_20_seeds(op_name):
    """Every differentiable op: max rel err <= 1e-4 at h=1e-4 over 20 seeds."""
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        closure, arrays = DIFFERENTIABLE_OPS[op_name](rng)
        inputs = [t64(a, requires_grad=True) for a in arrays]
        report = T.grad_check(closure, inputs, h=1e-4, tol=1e-4,
                              name=f"{op_name}[seed={seed}]")
        assert report.passed, report.summary()
