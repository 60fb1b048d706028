"""Tensor kernel: op semantics, oracles, and gradient integrity."""

import numpy as np
import pytest

from anchorseg import tensor as T
from anchorseg.gradcheck import check_gradients, finite_diff_grad, relative_error


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


def matmul_oracle(a, b):
    """Independent triple-loop product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_oracle(row):
    """Direct exp-normalize in extended precision."""
    import math
    vals = [math.exp(float(v)) for v in row]
    z = math.fsum(vals)
    return np.array([v / z for v in vals])


class TestMatmul:
    def test_identity(self):
        i2 = T.tensor(np.eye(2))
        out = T.matmul(i2, i2)
        assert np.array_equal(out.data, np.eye(2))

    def test_identity_right(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, T.tensor(np.eye(2)))
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = T.matmul(T.tensor(a), T.tensor(b))
        assert np.max(np.abs(out.data - matmul_oracle(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_last_axis(T.tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_large_inputs_no_overflow(self):
        out = T.softmax_last_axis(T.tensor([1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_matches_exp_normalize_oracle(self):
        row = np.array([1.0, 2.0, 3.0])
        out = T.softmax_last_axis(T.tensor(row))
        assert np.max(np.abs(out.data - softmax_oracle(row))) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(6, 9))
            s = T.softmax_last_axis(T.tensor(x)).data.sum(axis=-1)
            assert np.max(np.abs(s - 1.0)) < 1e-9


class TestSigmoid:
    def test_zero(self):
        assert T.sigmoid_map(T.tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        out = T.sigmoid_map(T.tensor([40.0, -40.0]))
        assert abs(out.data[0] - 1.0) < 1e-12
        assert abs(out.data[1] - 0.0) < 1e-12

    def test_one(self):
        # mpmath-checked reference value of 1/(1+e^-1)
        assert abs(T.sigmoid_map(T.tensor([1.0])).data[0] - 0.7310585786300049) < 1e-15


class TestLayerNormalize:
    def test_constant_row_is_zeroed(self):
        x = T.tensor([[3.0, 3.0, 3.0, 3.0]])
        out = T.layer_normalize(x, T.tensor(np.ones(4)), T.tensor(np.zeros(4)))
        assert np.max(np.abs(out.data)) < 1e-6

    def test_two_element_closed_form(self):
        # var([1,-1]) = 1, so each normalized entry is 1/sqrt(1+eps)
        c = 1.0 / np.sqrt(1.0 + 1e-5)
        out = T.layer_normalize(T.tensor([[1.0, -1.0]]), T.tensor(np.ones(2)), T.tensor(np.zeros(2)))
        assert np.max(np.abs(out.data - [[c, -c]])) < 1e-12

    def test_bias_shifts_mean(self):
        rng = np.random.default_rng(0)
        x = T.tensor(rng.normal(size=(5, 8)))
        bias = T.tensor(rng.normal(size=8))
        out = T.layer_normalize(x, T.tensor(np.ones(8)), bias)
        assert np.allclose(out.data.mean(axis=-1), bias.data.mean(), atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.layer_normalize(T.tensor(np.zeros((2, 4))), T.tensor(np.ones(3)), T.tensor(np.zeros(4)))


class TestConcat:
    def test_row_order_preserved(self):
        a = T.tensor([[1.0, 2.0]])
        b = T.tensor([[3.0, 4.0], [5.0, 6.0]])
        out = T.concat_tokens([a, b])
        assert out.shape == (3, 2)
        assert np.array_equal(out.data, [[1, 2], [3, 4], [5, 6]])

    def test_single_part_identity(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.concat_tokens([a]).data, a.data)

    def test_three_part_extents(self):
        parts = [T.tensor(np.zeros((n, 5))) for n in (64, 64, 16)]
        assert T.concat_tokens(parts).shape == (144, 5)

    def test_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.concat_tokens([T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 4)))])


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_half_square_gives_x(self):
        rng = np.random.default_rng(1)
        x = T.tensor(rng.normal(size=(4, 3)), requires_grad=True)
        loss = T.mul_scalar(T.sum_all(T.mul(x, x)), 0.5)
        T.backward(loss)
        assert np.max(np.abs(x.grad - x.data)) < 1e-12

    def test_non_scalar_rejected(self):
        x = T.tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(T.mul(x, x))

    def test_double_backward_rejected(self):
        x = T.tensor([1.0], requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(T.GraphConsumedError):
            T.backward(loss)

    def test_reset_rearms(self):
        x = T.tensor([1.0], requires_grad=True)
        T.backward(T.sum_all(x))
        T.reset_graph()
        x.grad = None
        T.backward(T.sum_all(x))
        assert x.grad is not None

    def test_shared_input_accumulates(self):
        x = T.tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1 = 5
        T.backward(T.sum_all(y))
        assert abs(x.grad[0] - 5.0) < 1e-12


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(16, 16))
        b = rng.normal(size=(16, 16))

        def run():
            x = T.softmax_last_axis(T.matmul(T.tensor(a), T.tensor(b)))
            return T.layer_normalize(x, T.tensor(np.ones(16)), T.tensor(np.zeros(16))).data

        first = run()
        for _ in range(3):
            assert np.array_equal(run(), first)


def _fd_check_unary(op, x0, tol=1e-4):
    x = T.tensor(x0.copy(), requires_grad=True)
    out_shape = op(T.tensor(x0)).data.shape
    T.reset_graph()
    rng = np.random.default_rng(5)
    weights = rng.normal(size=out_shape)  # random cotangent makes the check non-trivial

    def build():
        y = op(x)
        return T.sum_all(T.mul(y, T.tensor(weights))) if out_shape else y

    errs = check_gradients(build, {"x": x})
    assert errs["x"] < tol, errs


class TestOpGradients:
    """Every differentiable op vs central finite differences (step 1e-3)."""

    def test_elementwise_ops(self):
        rng = np.random.default_rng(21)
        x0 = rng.normal(size=(3, 4))
        for op in (T.sigmoid_map, T.silu, T.softmax_last_axis):
            _fd_check_unary(op, x0)
        _fd_check_unary(T.log, np.abs(x0) + 0.5)
        _fd_check_unary(lambda t: T.clamp(t, -0.5, 0.5), x0 + 2.0)  # inactive clamp region
        _fd_check_unary(lambda t: T.add_scalar(T.mul_scalar(t, 3.0), 1.0), x0)
        _fd_check_unary(lambda t: T.slice_rows(t, 1, 3), x0)
        _fd_check_unary(lambda t: T.slice_cols(t, 0, 2), x0)
        _fd_check_unary(T.transpose, x0)
        _fd_check_unary(lambda t: T.reshape(t, (4, 3)), x0)
        _fd_check_unary(T.mean_all, x0)

    def test_binary_ops(self):
        rng = np.random.default_rng(22)
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(3, 4)) + 3.0  # keep div denominators away from zero
        w = rng.normal(size=(3, 4))
        for op in (T.add, T.sub, T.mul, T.div):
            a = T.tensor(a0.copy(), requires_grad=True)
            b = T.tensor(b0.copy(), requires_grad=True)

            def build(op=op, a=a, b=b):
                return T.sum_all(T.mul(op(a, b), T.tensor(w)))

            errs = check_gradients(build, {"a": a, "b": b})
            assert max(errs.values()) < 1e-4, (op.__name__, errs)

    def test_matmul_grad(self):
        rng = np.random.default_rng(23)
        a = T.tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = T.tensor(rng.normal(size=(5, 2)), requires_grad=True)
        w = rng.normal(size=(3, 2))

        def build():
            return T.sum_all(T.mul(T.matmul(a, b), T.tensor(w)))

        errs = check_gradients(build, {"a": a, "b": b})
        assert max(errs.values()) < 1e-4, errs

    def test_layernorm_grad(self):
        rng = np.random.default_rng(24)
        x = T.tensor(rng.normal(size=(4, 6)), requires_grad=True)
        gain = T.tensor(rng.normal(size=6), requires_grad=True)
        bias = T.tensor(rng.normal(size=6), requires_grad=True)
        w = rng.normal(size=(4, 6))

        def build():
            return T.sum_all(T.mul(T.layer_normalize(x, gain, bias), T.tensor(w)))

        errs = check_gradients(build, {"x": x, "gain": gain, "bias": bias})
        assert max(errs.values()) < 1e-4, errs

    def test_bias_concat_take_grads(self):
        rng = np.random.default_rng(25)
        x = T.tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = T.tensor(rng.normal(size=4), requires_grad=True)
        table = T.tensor(rng.normal(size=(7, 4)), requires_grad=True)
        other = T.tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(8, 4))

        def build():
            taken = T.take_rows(table, [1, 6, 1])  # repeated row exercises scatter-add
            seq = T.concat_tokens([T.add_bias(x, b), taken, other])
            return T.sum_all(T.mul(seq, T.tensor(w)))

        errs = check_gradients(build, {"x": x, "b": b, "table": table, "other": other})
        assert max(errs.values()) < 1e-4, errs

    def test_cross_entropy_grad_and_value(self):
        rng = np.random.default_rng(26)
        logits = T.tensor(rng.normal(size=(5, 7)), requires_grad=True)
        targets = rng.integers(0, 7, size=5)

        # value against a per-token -log softmax oracle
        oracle = -np.mean([np.log(softmax_oracle(logits.data[i])[targets[i]]) for i in range(5)])
        out = T.cross_entropy_mean(logits, targets)
        assert abs(out.item() - oracle) < 1e-12

        def build():
            return T.cross_entropy_mean(logits, targets)

        errs = check_gradients(build, {"logits": logits})
        assert errs["logits"] < 1e-4

    def test_full_finite_diff_on_small_graph(self):
        """Composite graph, exhaustive FD on every entry."""
        rng = np.random.default_rng(27)
        w1 = T.tensor(rng.normal(size=(4, 6), scale=0.5), requires_grad=True)
        w2 = T.tensor(rng.normal(size=(6, 3), scale=0.5), requires_grad=True)
        x = rng.normal(size=(5, 4))

        def forward():
            h = T.silu(T.matmul(T.tensor(x), w1))
            z = T.softmax_last_axis(T.matmul(h, w2))
            return T.mean_all(T.mul(z, z))

        T.reset_graph()
        loss = forward()
        T.backward(loss)
        analytic = {"w1": w1.grad.copy(), "w2": w2.grad.copy()}

        def value():
            T.reset_graph()
            return forward().item()

        for name, leaf in (("w1", w1), ("w2", w2)):
            fd = finite_diff_grad(value, leaf)
            assert relative_error(analytic[name], fd) < 1e-4
