import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import softmax as scipy_softmax

from src import tensor as T
from src.errors import ShapeError, TapeError
from src.tensor import LOG_CLAMP, Tape, Tensor, backward, finite_diff_check


class TestPrimitives:
    def test_matmul_value(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-14)

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax_matches_scipy(self, rng):
        z = rng.normal(scale=3.0, size=(5, 4))
        assert_allclose(T.softmax(Tensor(z)).data, scipy_softmax(z, axis=-1), rtol=1e-12)

    def test_softmax_survives_large_logits(self):
        p = T.softmax(Tensor([[1000.0, 1001.0]])).data
        assert np.all(np.isfinite(p))
        assert_allclose(p.sum(), 1.0, atol=1e-15)

    def test_log_is_clamped(self):
        assert T.log(Tensor([0.0])).data[0] == np.log(LOG_CLAMP)

    def test_power_defines_zero_base_as_zero(self):
        assert_array_equal(T.power(Tensor([0.0, 4.0]), 0.5).data, [0.0, 2.0])
        assert_array_equal(T.power(Tensor([0.0, 3.0]), 0.0).data, [0.0, 1.0])

    def test_transpose(self, rng):
        a = rng.normal(size=(2, 3))
        assert_array_equal(T.transpose(Tensor(a)).data, a.T)

    def test_select_rows(self, rng):
        x = rng.normal(size=(5, 3))
        assert_allclose(T.select_rows(Tensor(x), [4, 1]).data, x[[4, 1]], rtol=1e-15)


class TestBackward:
    def test_frobenius_norm_subgradient_at_zero(self):
        W = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape() as tape:
            n = T.frobenius_norm(W)
        backward(n, tape)
        assert_array_equal(W.grad, np.zeros((2, 2)))

    def test_broadcast_add_gradient_is_summed(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.add(a, b))
        backward(loss, tape)
        assert_array_equal(b.grad, [3.0, 3.0])
        assert_array_equal(a.grad, np.ones((3, 2)))

    def test_shared_input_accumulates(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.mul(x, x))
        backward(loss, tape)
        assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_repeated_backward_does_not_double(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = T.sum(T.scale(x, 3.0))
            backward(loss, tape)
        assert_array_equal(x.grad, [3.0, 3.0, 3.0])

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(TapeError):
            backward(y, tape)

    def test_loss_from_another_tape_is_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape():
            loss = T.sum(x)
        with Tape() as other:
            pass
        with pytest.raises(TapeError):
            backward(loss, other)

    def test_nothing_is_recorded_without_a_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = T.sum(x)
        assert not y.requires_grad

    def test_tape_records_only_when_gradients_are_needed(self):
        with Tape() as tape:
            T.sum(Tensor(np.ones(3)))
        assert len(tape) == 0


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", range(5))
    def test_small_network_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        X = Tensor(rng.normal(size=(4, 3)))
        W1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        W2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)

        def f(params):
            a, b = params
            p = T.softmax(T.matmul(T.relu(T.matmul(X, a)), b))
            return T.add(T.mean(T.sum(T.log(p), axis=1)), T.frobenius_norm(T.matmul(T.transpose(a), a)))

        assert finite_diff_check(f, [W1, W2]) <= 1e-6

    def test_power_and_inner_match_central_differences(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

        def f(params):
            a, b = params
            return T.sum(T.inner(T.power(a, 0.3), b))

        assert finite_diff_check(f, [x, y]) <= 1e-6
