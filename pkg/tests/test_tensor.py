"""Unit and oracle tests for the autodiff tensor engine."""

import numpy as np
import pytest

from unlearnkit import tensor as T
from unlearnkit.tensor import (
    DegenerateBatchError,
    GraphError,
    ShapeError,
    Tensor,
    backward,
    finite_diff_check,
)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def t32(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t32([[1.0, 2.0], [3.0, 4.0]])
        eye = t32(np.eye(2))
        assert np.array_equal(T.matmul(eye, a).data, a.data)

    def test_hand_product(self):
        a = t32([[1.0, 2.0], [3.0, 4.0]])
        b = t32([[1.0], [1.0]])
        assert np.array_equal(T.matmul(a, b).data, np.array([[3.0], [7.0]], dtype=np.float32))

    def test_zeros(self):
        z = t32(np.zeros((3, 4)))
        b = t32(np.arange(20.0).reshape(4, 5))
        assert np.array_equal(T.matmul(z, b).data, np.zeros((3, 5), dtype=np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t32(np.ones((2, 3))), t32(np.ones((2, 3))))

    def test_batched(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 3, 5)).astype(np.float32)
        b = rng.standard_normal((4, 5, 2)).astype(np.float32)
        out = T.matmul(t32(a), t32(b)).data
        want = np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)
        assert np.array_equal(out, want)

    def test_row_result_independent_of_batch(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((40, 16)).astype(np.float32)
        b = rng.standard_normal((16, 24)).astype(np.float32)
        full = T.matmul(t32(a), t32(b)).data
        for m in (1, 3, 17):
            part = T.matmul(t32(a[:m]), t32(b)).data
            assert np.array_equal(full[:m], part)

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((64, 128)).astype(np.float32)
        b = rng.standard_normal((128, 96)).astype(np.float32)
        outs = [T.matmul(t32(a), t32(b)).data.tobytes() for _ in range(3)]
        assert outs[0] == outs[1] == outs[2]


class TestFusedOps:
    def test_cross_entropy_uniform_logits(self):
        logits = t32(np.zeros((1, 1, 2)))
        loss = T.cross_entropy(logits, np.array([[0]]), np.array([[True]]))
        assert abs(loss.item() - np.log(2.0)) < 1e-6

    def test_softmax_symmetry(self):
        out = T.softmax(t32([0.0, 0.0, 0.0])).data
        assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 7)).astype(np.float32) * 10
        out = T.softmax(t32(x)).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_layer_norm_constant_vector(self):
        x = t32(np.full((3, 8), 2.5))
        gain = t32(np.ones(8))
        bias = t32(np.zeros(8))
        out = T.layer_norm(x, gain, bias).data
        assert np.allclose(out, 0.0, atol=1e-6)

    def test_cross_entropy_empty_mask(self):
        logits = t32(np.zeros((1, 2, 4)))
        with pytest.raises(DegenerateBatchError):
            T.cross_entropy(logits, np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))

    def test_cross_entropy_nonnegative(self):
        rng = np.random.default_rng(3)
        logits = t32(rng.standard_normal((2, 5, 9)))
        targets = rng.integers(0, 9, size=(2, 5))
        loss = T.cross_entropy(logits, targets)
        assert loss.item() >= 0.0

    def test_gelu_values(self):
        # pinned tanh approximation at a few points
        x = np.array([0.0, 1.0, -1.0], dtype=np.float64)
        got = T.gelu(t64(x)).data
        c = np.sqrt(2 / np.pi)
        want = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))
        assert np.allclose(got, want, atol=1e-12)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_grad(self):
        x = t64([3.0, -2.0], requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        backward(loss)
        assert np.allclose(x.grad, 2 * x.data)

    def test_backward_twice_raises(self):
        x = t64([1.0], requires_grad=True)
        loss = T.sum_all(x)
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_grad_accumulates_over_reuse(self):
        x = t64([2.0], requires_grad=True)
        loss = T.sum_all(T.add(T.mul(x, x), x))  # x^2 + x -> 2x + 1
        backward(loss)
        assert np.allclose(x.grad, [5.0])

    def test_no_grad_path_builds_no_graph(self):
        a = t32(np.ones((2, 2)))
        out = T.matmul(a, a)
        assert out._backward is None and not out.requires_grad


class TestFiniteDiff:
    def test_quadratic(self):
        rng = np.random.default_rng(0)
        params = {"w": Tensor(rng.standard_normal(10), requires_grad=True)}

        def f(p):
            return T.sum_all(T.mul(p["w"], p["w"]))

        assert finite_diff_check(f, params, eps=1e-5, n_samples=10, seed=0) <= 1e-8

    def test_linear(self):
        params = {"w": Tensor(np.linspace(-1, 1, 7), requires_grad=True)}

        def f(p):
            return T.sum_all(T.scale(p["w"], 3.0))

        assert finite_diff_check(f, params, eps=1e-5, n_samples=7, seed=1) <= 1e-9

    @pytest.mark.parametrize("op_name", ["gelu", "softmax", "softplus"])
    def test_unary_ops(self, op_name):
        op = getattr(T, op_name)
        rng = np.random.default_rng(4)
        params = {"x": Tensor(rng.standard_normal((3, 5)), requires_grad=True)}

        def f(p):
            return T.sum_all(T.mul(op(p["x"]), Tensor(rng2_const)))

        rng2_const = np.random.default_rng(5).standard_normal((3, 5))
        assert finite_diff_check(f, params, eps=1e-5, n_samples=15, seed=2) <= 1e-7

    def test_layer_norm(self):
        rng = np.random.default_rng(6)
        params = {
            "x": Tensor(rng.standard_normal((4, 8)), requires_grad=True),
            "g": Tensor(rng.standard_normal(8), requires_grad=True),
            "b": Tensor(rng.standard_normal(8), requires_grad=True),
        }
        w = rng.standard_normal((4, 8))

        def f(p):
            return T.sum_all(T.mul(T.layer_norm(p["x"], p["g"], p["b"]), Tensor(w)))

        assert finite_diff_check(f, params, eps=1e-5, n_samples=40, seed=3) <= 1e-7

    def test_matmul_embedding_cross_entropy(self):
        rng = np.random.default_rng(7)
        ids = rng.integers(0, 11, size=(2, 6))
        targets = rng.integers(0, 11, size=(2, 6))
        mask = rng.random((2, 6)) > 0.3
        params = {
            "emb": Tensor(rng.standard_normal((11, 8)), requires_grad=True),
            "w": Tensor(rng.standard_normal((8, 11)), requires_grad=True),
        }

        def f(p):
            h = T.embedding_lookup(p["emb"], ids)
            logits = T.matmul(T.reshape(h, (12, 8)), p["w"])
            return T.cross_entropy(T.reshape(logits, (2, 6, 11)), targets, mask)

        assert finite_diff_check(f, params, eps=1e-5, n_samples=60, seed=4) <= 1e-7

    def test_sequence_logprob_sums(self):
        rng = np.random.default_rng(8)
        targets = rng.integers(0, 6, size=(3, 4))
        mask = np.ones((3, 4), dtype=bool)
        weights = rng.standard_normal(3)
        params = {"logits": Tensor(rng.standard_normal((3, 4, 6)), requires_grad=True)}

        def f(p):
            sums = T.sequence_logprob_sums(p["logits"], targets, mask)
            return T.sum_all(T.mul(sums, Tensor(weights)))

        assert finite_diff_check(f, params, eps=1e-5, n_samples=40, seed=5) <= 1e-7
