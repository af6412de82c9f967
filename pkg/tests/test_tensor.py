import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dtnet import tensor as T
from dtnet.tensor import Tensor
from gradcheck import gradient_errors, weighted_sum


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[2.0, 3], [4, 5]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_matmul_hand(self):
        np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data, [[11]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_batch_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 1))))

    def test_softmax_values(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-7)

    def test_softmax_random_sums_to_one(self, rng):
        assert abs(T.softmax_lastdim(Tensor(rng.normal(size=5))).data.sum() - 1) < 1e-6

    def test_softmax_large_logits_stable(self):
        out = T.softmax_lastdim(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))

    def test_linear(self):
        np.testing.assert_array_equal(T.linear(Tensor([1.0, 1]), Tensor(np.eye(2)), Tensor([0.0, 0])).data, [1, 1])
        np.testing.assert_allclose(T.linear(Tensor([2.0, 3]), Tensor([[1.0], [1]]), Tensor([0.5])).data, [5.5])

    def test_linear_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))))

    def test_relu_concat_add(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0, 2])).data, [0, 0, 2])
        np.testing.assert_array_equal(T.concat_lastdim(Tensor([[1.0]]), Tensor([[2.0]])).data, [[1, 2]])
        x = Tensor(np.arange(4.0))
        np.testing.assert_array_equal(T.add(x, Tensor(np.zeros(4))).data, x.data)

    def test_add_rejects_broadcast(self):
        with pytest.raises(T.DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_batchnorm_zero_variance_gives_beta(self):
        x = Tensor(np.tile([[3.0, -2.0]], (4, 1)))
        out = T.batchnorm(x, Tensor([2.0, 5.0]), Tensor([0.7, -0.1]), np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(out.data, np.tile([[0.7, -0.1]], (4, 1)))

    def test_batchnorm_unit_variance(self):
        out = T.batchnorm(Tensor([[-1.0], [1.0]]), Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), True)
        np.testing.assert_allclose(out.data, [[-1], [1]], atol=1e-5)

    def test_batchnorm_running_stats_and_eval(self):
        rm, rv = np.zeros(1), np.ones(1)
        x = Tensor([[1.0], [3.0]])
        T.batchnorm(x, Tensor([1.0]), Tensor([0.0]), rm, rv, True, momentum=0.1)
        np.testing.assert_allclose(rm, [0.2])
        np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])  # unbiased batch var of [1, 3] is 2
        out = T.batchnorm(x, Tensor([1.0]), Tensor([0.0]), rm, rv, False)
        np.testing.assert_allclose(out.data, (x.data - 0.2) / np.sqrt(1.1 + 1e-5))

    def test_batchnorm_single_row_train_rejected(self):
        with pytest.raises(T.DegenerateBatchError):
            T.batchnorm(Tensor([[1.0, 2.0]]), Tensor([1.0, 1]), Tensor([0.0, 0]), np.zeros(2), np.ones(2), True)

    def test_batchnorm_single_row_eval_ok(self):
        T.batchnorm(Tensor([[1.0, 2.0]]), Tensor([1.0, 1]), Tensor([0.0, 0]), np.zeros(2), np.ones(2), False)

    def test_max_and_gather(self):
        x = Tensor(np.array([[[1.0, 5.0], [3.0, 2.0]]]))
        np.testing.assert_array_equal(T.max_axis(x, 1).data, [[3, 5]])
        g = T.gather_rows(x, np.array([[[1, 1], [0, 1]]]))
        assert g.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(g.data[0, 0, 0], [3, 2])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(np.ones((1, 3, 2))), np.array([[3]]))

    def test_dropout_rows_drops_whole_rows(self, rng):
        out = T.dropout_rows(Tensor(np.ones((200, 4))), 0.5, rng)
        rows = out.data
        assert set(np.unique(rows)) <= {0.0, 2.0}
        assert np.all((rows == 0).all(axis=1) | (rows == 2).all(axis=1))

    def test_dropout_identity_in_eval(self, rng):
        x = Tensor(np.ones(5))
        assert T.dropout(x, 0.5, rng, training=False) is x
        assert T.dropout_rows(x, 0.0, rng) is x

    def test_cross_entropy_matches_formula(self, rng):
        z = rng.normal(size=(4, 3))
        lab = np.array([0, 2, 1, 1])
        expect = -np.mean([z[i, lab[i]] - np.log(np.exp(z[i]).sum()) for i in range(4)])
        assert abs(T.cross_entropy(Tensor(z), lab).item() - expect) < 1e-12

    def test_checked_mode_raises_on_nan(self):
        with np.errstate(invalid="ignore"):
            with T.checked():
                with pytest.raises(T.NonFiniteError):
                    T.scale(Tensor([np.inf]), 0.0)
            T.scale(Tensor([np.inf]), 0.0)  # unchecked passes through

    def test_precision_switch(self):
        with T.precision(np.float64):
            assert Tensor([1, 2]).dtype == np.float64
        assert Tensor([1, 2]).dtype == np.float32


class TestBackward:
    def test_sum_grad(self):
        x = leaf([1.0, 2.0, 3.0])
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square_grad(self):
        x = leaf([1.0, 2.0])
        # sum(x^2) as x @ x^T on a row vector
        row = T.reshape(x, (1, 2))
        T.backward(T.sum(T.matmul(row, T.transpose_last2(row))))
        np.testing.assert_allclose(x.grad, [2, 4])

    def test_matmul_grad_is_ones_times_bt(self, rng):
        A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        T.backward(T.sum(T.matmul(A, B)))
        np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(T.RankError):
            T.backward(T.scale(leaf([1.0, 2.0]), 2.0))

    def test_second_backward_rejected(self):
        x = leaf([1.0, 2.0])
        loss = T.sum(T.relu(x))
        T.backward(loss)
        with pytest.raises(T.GraphConsumedError):
            T.backward(loss)

    def test_all_leaves_populated(self, rng):
        a, b, c = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=3))
        T.backward(T.sum(T.linear(T.matmul(a, b), b, c)))
        assert all(t.grad is not None and t.grad.shape == t.shape for t in (a, b, c))

    def test_tape_records_execution_order(self, rng):
        a = leaf(rng.normal(size=(2, 2)))
        h = T.matmul(a, a)
        h = T.relu(h)
        h = T.softmax_lastdim(h)
        loss = T.sum(h)
        assert T.Tape.of(loss).ops() == ["matmul", "relu", "softmax", "sum"]

    def test_composition_equals_manual_chain(self, rng):
        A, B, R = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=(5, 1))
        a = leaf(A)
        T.backward(T.sum(T.linear(T.relu(T.matmul(a, Tensor(B))), Tensor(R))))
        g_out = np.ones((4, 1)) @ R.T
        g_mm = g_out * (A @ B > 0)
        np.testing.assert_allclose(a.grad, g_mm @ B.T, rtol=0, atol=1e-12)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.scale(x, 2.0)
        assert not y.requires_grad and y.is_leaf


OPS_WITHOUT_VARIANCE = {
    "matmul": lambda rng: ([leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))], lambda a, b: T.matmul(a, b)),
    "batched_matmul": lambda rng: (
        [leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))],
        lambda a, b: T.matmul(a, b),
    ),
    "softmax": lambda rng: ([leaf(rng.normal(size=(3, 5)))], T.softmax_lastdim),
    "linear": lambda rng: (
        [leaf(rng.normal(size=(5, 3))), leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))],
        T.linear,
    ),
    "relu": lambda rng: ([leaf(rng.normal(size=(4, 3)))], T.relu),
    "add": lambda rng: ([leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(4, 3)))], T.add),
    "concat": lambda rng: (
        [leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(4, 2)))],
        lambda a, b: T.concat_lastdim(a, b),
    ),
    "transpose": lambda rng: ([leaf(rng.normal(size=(2, 3, 4)))], T.transpose_last2),
    "permute": lambda rng: ([leaf(rng.normal(size=(2, 3, 4)))], lambda a: T.permute(a, (1, 2, 0))),
    "scale": lambda rng: ([leaf(rng.normal(size=(3, 3)))], lambda a: T.scale(a, -1.7)),
    "sum_axis": lambda rng: ([leaf(rng.normal(size=(3, 4, 2)))], lambda a: T.sum(a, axis=1)),
    "mean": lambda rng: ([leaf(rng.normal(size=(3, 4, 2)))], lambda a: T.mean(a, axis=1)),
    "max": lambda rng: ([leaf(rng.normal(size=(2, 5, 3)))], lambda a: T.max_axis(a, 1)),
    "gather": lambda rng: (
        [leaf(rng.normal(size=(2, 5, 3)))],
        lambda a: T.gather_rows(a, np.array([[[0, 4, 4], [1, 2, 0]], [[3, 3, 3], [0, 1, 2]]])),
    ),
    "dropout_rows": lambda rng: (
        [leaf(rng.normal(size=(6, 3)))],
        lambda a: T.dropout_rows(a, 0.5, np.random.default_rng(5)),
    ),
    "cross_entropy": lambda rng: (
        [leaf(rng.normal(size=(5, 4)))],
        lambda a: T.reshape(T.cross_entropy(a, np.array([0, 3, 1, 1, 2])), (1,)),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS_WITHOUT_VARIANCE))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    leaves, fn = OPS_WITHOUT_VARIANCE[name](rng)
    out_shape = fn(*leaves).shape
    weights = rng.normal(size=out_shape)
    errors = gradient_errors(lambda: weighted_sum(fn(*leaves), weights), leaves)
    assert max(errors) < 1e-4, errors


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng.normal(size=(6, 3))), leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    weights = rng.normal(size=(6, 3))
    errors = gradient_errors(lambda: weighted_sum(T.batchnorm(x, g, b, rm.copy(), rv.copy(), training), weights), [x, g, b])
    assert max(errors) < 1e-3, errors


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    y = T.softmax_lastdim(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_lastdim(Tensor(x + c)).data, y, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3), st.randoms(use_true_random=False))
def test_concat_then_split_is_exact(widths, rows, r):
    parts = [np.array([[r.uniform(-1e6, 1e6) for _ in range(w)] for _ in range(rows)]) for w in widths]
    joined = T.concat_lastdim(*[Tensor(p) for p in parts])
    for got, want in zip(T.split_lastdim(joined, widths), parts):
        assert np.array_equal(got.data, want)
