import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proctrain import tensor as tc
from proctrain.tensor import Tensor

from .gradcheck import check_gradients, random_graph


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor(np.eye(2)), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_by_column(self):
        assert tc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_output_is_float32(self):
        assert tc.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))).data.dtype == np.float32


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_stable_for_large_inputs(self):
        np.testing.assert_array_equal(tc.softmax_rows(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_matches_extended_precision(self):
        mpmath.mp.dps = 40
        es = [mpmath.e ** v for v in (1, 2, 3)]
        expected = [float(e / sum(es)) for e in es]
        np.testing.assert_allclose(tc.softmax_rows(Tensor([1.0, 2.0, 3.0])).data, expected, atol=1e-6)

    def test_causal_mask_zeroes_future_exactly(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 5, 5)) * 10)
        y = tc.softmax_rows(x, causal=True).data
        assert np.all(y[:, np.triu_indices(5, 1)[0], np.triu_indices(5, 1)[1]] == 0.0)
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)

    def test_all_masked_row_is_an_error(self):
        with pytest.raises(ValueError):
            tc.softmax_rows(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=20))
    def test_rows_sum_to_one(self, xs):
        y = tc.softmax_rows(Tensor(xs)).data
        assert np.all(y >= 0)
        assert abs(float(y.astype(np.float64).sum()) - 1.0) < 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        out = tc.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_already_normalized(self):
        out = tc.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_random_row_statistics(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=64)
        out = tc.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data.astype(np.float64)
        assert abs(out.mean()) < 1e-3
        assert abs(out.var() - 1.0) < 1e-3


class TestGelu:
    def test_zero(self):
        assert tc.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_is_identity(self):
        assert tc.gelu(Tensor([20.0])).data[0] == pytest.approx(20.0)

    def test_one_matches_high_precision_tanh_formula(self):
        mpmath.mp.dps = 40
        x = mpmath.mpf(1)
        ref = 0.5 * x * (1 + mpmath.tanh(mpmath.sqrt(2 / mpmath.pi) * (x + mpmath.mpf("0.044715") * x**3)))
        assert abs(float(tc.gelu(Tensor([1.0])).data[0]) - float(ref)) < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = tc.cross_entropy_masked(Tensor(np.zeros((1, 4))), [2], [True])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_confident_correct(self):
        z = np.zeros((1, 5))
        z[0, 3] = 100.0
        assert tc.cross_entropy_masked(Tensor(z), [3], [True]).item() == pytest.approx(0.0, abs=1e-6)

    def test_mask_selects_positions(self):
        z = np.random.default_rng(3).standard_normal((3, 6))
        t = [1, 4, 0]

        def nll(row, target):
            m = max(row)
            return -(row[target] - m - math.log(sum(math.exp(v - m) for v in row)))

        expected = (nll(z[0], 1) + nll(z[2], 0)) / 2
        loss = tc.cross_entropy_masked(Tensor(z), t, [True, False, True])
        assert loss.item() == pytest.approx(expected, abs=1e-5)

    def test_empty_mask(self):
        with pytest.raises(tc.InvalidBatchError):
            tc.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [False, False])

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            tc.cross_entropy_masked(Tensor(np.zeros((1, 3))), [3], [True])


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == pytest.approx(6.0)

    def test_sum_of_identity_matmul(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 3)), requires_grad=True)
        tc.matmul(x, Tensor(np.eye(3))).sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 3)))

    def test_grads_accumulate_across_uses(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x + x * 3.0).sum().backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            tc.backward(x * 2.0)

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w1 = Tensor(rng.standard_normal((5, 8)) * 0.5, requires_grad=True)
        b1 = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True)
        w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
        x = rng.standard_normal((4, 5))
        y = rng.integers(0, 3, 4)

        def loss_fn():
            h = tc.gelu(tc.linear(Tensor(x), w1, b1))
            return tc.cross_entropy_masked(tc.matmul(h, w2), y)

        assert check_gradients(loss_fn, [w1, b1, w2]) < 1e-3

    def test_tape_is_topologically_ordered(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * 2.0
        z = (y + x).sum()
        tape = tc.build_tape(z)
        pos = {id(t): i for i, t in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]
        assert len(tape) == len({id(t) for t in tape})

    @pytest.mark.parametrize("seed", range(5))
    def test_random_graphs(self, seed):
        loss_fn, params = random_graph(seed)
        assert check_gradients(loss_fn, params) < 1e-3


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self):
        w = Tensor([1.5, -2.0], requires_grad=True)
        w.grad = np.zeros(2, np.float32)
        tc.adamw_step([w], tc.AdamWState(), lr=0.1)
        np.testing.assert_array_equal(w.data, [1.5, -2.0])

    def test_first_step_moves_by_lr(self):
        # bias-corrected first step: m_hat = g, v_hat = g^2 -> update = g/(|g|+eps)
        w = Tensor([1.0], requires_grad=True)
        w.grad = np.ones(1, np.float32)
        tc.adamw_step([w], tc.AdamWState(), lr=0.1)
        assert w.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-7)

    def test_decay_only(self):
        w = Tensor([2.0], requires_grad=True)
        w.grad = np.zeros(1, np.float32)
        tc.adamw_step([w], tc.AdamWState(), lr=0.1, weight_decay=0.01)
        assert w.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-7)


def test_clip_grad_norm():
    a = Tensor([0.0], requires_grad=True)
    a.grad = np.array([3.0], np.float32)
    b = Tensor([0.0], requires_grad=True)
    b.grad = np.array([4.0], np.float32)
    norm = tc.clip_grad_norm([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    assert math.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, rel=1e-5)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_identical_inputs_give_bit_identical_outputs():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 6, 6)).astype(np.float32)
    r1 = tc.softmax_rows(tc.matmul(Tensor(a), Tensor(b)), causal=True).data
    r2 = tc.softmax_rows(tc.matmul(Tensor(a), Tensor(b)), causal=True).data
    assert r1.tobytes() == r2.tobytes()
