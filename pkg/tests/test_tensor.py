import numpy as np
import pytest

from mugat.tensor import (NumericError, Parameter, ShapeError, Tensor,
                          cross_entropy_logits, gelu, gradients, layer_norm,
                          matmul, softmax)

from conftest import assert_grads_match


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        out = matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - naive_matmul(a, b)).max() < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_known_values(self):
        out = softmax(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[0.09003, 0.24473, 0.66524]], atol=1e-5)

    def test_overflow_stability(self):
        out = softmax(Tensor([[1000.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-200)

    @pytest.mark.parametrize("scale", [1.0, 10.0, 1e3])
    def test_rows_sum_to_one(self, rng, scale):
        x = rng.normal(size=(6, 9)) * scale
        out = softmax(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-9)


class TestLayerNorm:
    def _affine(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row_collapses_to_zero(self):
        g, b = self._affine(3)
        out = layer_norm(Tensor([[1.0, 1.0, 1.0]]), g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_symmetric_row(self):
        g, b = self._affine(2)
        out = layer_norm(Tensor([[-1.0, 1.0]]), g, b)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_zero_gain_gives_bias(self, rng):
        x = rng.normal(size=(4, 5))
        bias = rng.normal(size=5)
        out = layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (4, 5)))

    def test_rejects_bad_eps(self):
        g, b = self._affine(2)
        with pytest.raises(ValueError):
            layer_norm(Tensor([[0.0, 1.0]]), g, b, eps=0.0)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_phi_of_one(self):
        # x * Phi(x) at x=1
        assert abs(gelu(Tensor([1.0])).data[0] - 0.8413) < 1e-3


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4)))
        loss = cross_entropy_logits(logits, np.array([0, 3]), pad_id=-1)
        assert abs(loss.item() - np.log(4)) < 1e-4

    def test_margin_drives_loss_to_zero(self):
        losses = []
        for margin in (5.0, 20.0):
            logits = np.zeros((1, 4))
            logits[0, 2] = margin
            losses.append(cross_entropy_logits(Tensor(logits), np.array([2])).item())
        assert losses[1] < losses[0] < 5e-2
        assert losses[1] < 1e-8

    def test_against_direct_evaluation(self, rng):
        logits = rng.normal(size=(3, 5))
        targets = rng.integers(0, 5, size=3)
        loss = cross_entropy_logits(Tensor(logits), targets).item()
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        direct = -np.mean([np.log(probs[i, t]) for i, t in enumerate(targets)])
        assert abs(loss - direct) < 1e-10

    def test_all_padded_is_error(self):
        with pytest.raises(ValueError):
            cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([0, 0]), pad_id=0)

    def test_pad_positions_ignored(self, rng):
        logits = rng.normal(size=(4, 5))
        full = cross_entropy_logits(Tensor(logits[:2]), np.array([1, 2]), pad_id=0).item()
        padded = cross_entropy_logits(Tensor(logits), np.array([1, 2, 0, 0]), pad_id=0).item()
        assert abs(full - padded) < 1e-12


class TestGradients:
    def test_sum_of_squares(self):
        p = Parameter(np.array([1.0, 2.0]), "x")
        loss = (p.tensor * p.tensor).sum()
        grads = gradients(loss, [p])
        np.testing.assert_allclose(grads["x"], [2.0, 4.0])

    def test_softmax_sum_is_constant(self):
        p = Parameter(np.array([[0.3, -1.2, 2.0]]), "x")
        loss = softmax(p.tensor).sum()
        grads = gradients(loss, [p])
        np.testing.assert_allclose(grads["x"], 0.0, atol=1e-12)

    def test_frozen_parameter_gets_no_grad(self):
        p = Parameter(np.array([1.0, 2.0]), "x", trainable=False)
        q = Parameter(np.array([3.0]), "y")
        loss = (p.tensor * q.tensor).sum()
        grads = gradients(loss, [p, q])
        assert "x" not in grads
        np.testing.assert_allclose(grads["y"], [3.0])


@pytest.mark.parametrize("seed", range(5))
class TestFiniteDifferenceContract:
    """Every differentiable op matches central differences on >= 5 seeds."""

    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a = Parameter(rng.normal(size=(3, 4)), "a")
        b = Parameter(rng.normal(size=(4, 2)), "b")
        assert_grads_match(lambda: (matmul(a.tensor, b.tensor)
                                    * matmul(a.tensor, b.tensor)).sum(), [a, b])

    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(3, 5)), "x")
        w = Tensor(rng.normal(size=(3, 5)))
        assert_grads_match(lambda: (softmax(x.tensor) * w).sum(), [x])

    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(3, 6)), "x")
        g = Parameter(rng.normal(size=6), "g")
        b = Parameter(rng.normal(size=6), "b")
        w = Tensor(rng.normal(size=(3, 6)))
        assert_grads_match(
            lambda: (layer_norm(x.tensor, g.tensor, b.tensor) * w).sum(), [x, g, b])

    def test_gelu(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(4, 3)), "x")
        assert_grads_match(lambda: (gelu(x.tensor) * gelu(x.tensor)).sum(), [x])

    def test_gelu_tanh_approximation(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(4, 3)), "x")
        assert_grads_match(lambda: gelu(x.tensor, approximate=True).sum(), [x])

    def test_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        x = Parameter(rng.normal(size=(4, 6)), "x")
        targets = rng.integers(0, 6, size=4)
        assert_grads_match(lambda: cross_entropy_logits(x.tensor, targets), [x])


class TestFiniteness:
    @pytest.mark.parametrize("scale", [1.0, 1e3])
    def test_no_nan_inf_on_extreme_inputs(self, rng, scale):
        x = Tensor(rng.normal(size=(4, 8)) * scale)
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        for out in (softmax(x), layer_norm(x, g, b), gelu(x)):
            assert np.all(np.isfinite(out.data))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_nonfinite_gradient_names_parameter(self):
        p = Parameter(np.array([1e200, 1e200]), "huge")
        with pytest.raises(NumericError):
            # overflow in the product triggers the op-level check
            loss = (p.tensor * p.tensor).sum()
            gradients(loss, [p])

    def test_nonfinite_constant_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.inf, 1.0])


class TestImmutabilityContract:
    def test_ops_do_not_mutate_inputs(self, rng):
        x = rng.normal(size=(3, 4))
        t = Tensor(x.copy())
        softmax(t)
        layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        gelu(t)
        np.testing.assert_array_equal(t.data, x)
