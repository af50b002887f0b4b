import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgd.tensor import (BatchNormStats, Parameter, Tensor, add, backward,
                        batch_norm2d, conv2d, global_avg_pool, linear, mul_const,
                        relu, sgd_step, softmax_cross_entropy, sq_l2_sum)

from _oracles import (assert_grads_close, conv2d_loops, numeric_gradient,
                      softmax_ce_two_pass, sq_l2_loop)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 3, 3)).astype(np.float32))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = conv2d(x, Tensor(w), padding=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_ones_kernel_sums_input():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = conv2d(x, w, stride=1, padding=0)
    expected = conv2d_loops(x.data.astype(np.float64), w.data.astype(np.float64))
    assert expected[0, 0, 0, 0] == 10.0
    np.testing.assert_allclose(out.data, expected)


@pytest.mark.parametrize("stride,padding,shape,wshape", [
    (1, 0, (2, 3, 5, 5), (4, 3, 3, 3)),
    (2, 1, (1, 2, 6, 7), (3, 2, 3, 3)),
    (1, 2, (2, 1, 4, 4), (2, 1, 5, 5)),
    (3, 1, (1, 2, 8, 8), (2, 2, 3, 3)),
])
def test_conv2d_matches_loop_oracle(stride, padding, shape, wshape):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(shape)
    w = rng.standard_normal(wshape)
    b = rng.standard_normal(wshape[0])
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding),
                               rtol=1e-10)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    target = rng.standard_normal(conv2d(Tensor(x), Tensor(w), Tensor(b),
                                        stride=stride, padding=padding).shape)

    def loss_value():
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        return float(((out.data - target) ** 2).sum())

    tx, tw, tb = (Tensor(a, requires_grad=True) for a in (x, w, b))
    loss = sq_l2_sum(conv2d(tx, tw, tb, stride=stride, padding=padding), Tensor(target))
    backward(loss)
    for analytic, numeric in zip((tx.grad, tw.grad, tb.grad),
                                 numeric_gradient(loss_value, [x, w, b])):
        assert_grads_close(analytic, numeric)


def test_conv2d_shape_errors_are_descriptive():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(x, w)
    with pytest.raises(ValueError, match="does not fit"):
        conv2d(x, Tensor(np.zeros((2, 3, 5, 5), dtype=np.float32)))
    with pytest.raises(ValueError, match="stride"):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32)), stride=0)


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def test_relu_values():
    out = relu(Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32)))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_all_positive_is_identity():
    x = np.abs(np.random.default_rng(1).standard_normal(16)) + 0.1
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_relu_gradient_is_indicator():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(40)
    tx = Tensor(x, requires_grad=True)
    backward(sq_l2_sum(relu(tx), Tensor(np.zeros_like(x))))

    def loss_value():
        return float((np.maximum(x, 0.0) ** 2).sum())

    assert_grads_close(tx.grad, numeric_gradient(loss_value, [x])[0])
    # the gradient mask is exactly indicator(x > 0)
    np.testing.assert_array_equal(tx.grad != 0, (x > 0) & (x != 0))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_identity_weight():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x)


def test_linear_dot_product_oracle():
    out = linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])),
                 Tensor(np.array([1.0])))
    assert out.data[0, 0] == 1 * 3 + 2 * 4 + 1 == 12


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)
    target = rng.standard_normal((3, 2))

    def loss_value():
        return float(((x @ w.T + b - target) ** 2).sum())

    tx, tw, tb = (Tensor(a, requires_grad=True) for a in (x, w, b))
    backward(sq_l2_sum(linear(tx, tw, tb), Tensor(target)))
    for analytic, numeric in zip((tx.grad, tw.grad, tb.grad),
                                 numeric_gradient(loss_value, [x, w, b])):
        assert_grads_close(analytic, numeric)


def test_linear_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_batch_norm_already_normalized_input_passes_through():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((8, 3, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                       BatchNormStats(3, dtype=np.float64), training=True)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_batch_norm_zero_gamma_yields_beta():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 2, 3, 3))
    beta = np.array([0.5, -1.5])
    out = batch_norm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(beta),
                       BatchNormStats(2, dtype=np.float64), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients_match_finite_differences(training):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 2, 4, 4))
    gamma = rng.standard_normal(2) + 1.0
    beta = rng.standard_normal(2)
    target = rng.standard_normal(x.shape)
    run_mean, run_var = rng.standard_normal(2) * 0.1, np.abs(rng.standard_normal(2)) + 0.5

    def fresh_stats():
        stats = BatchNormStats(2, dtype=np.float64)
        stats.mean, stats.var = run_mean.copy(), run_var.copy()
        return stats

    def loss_value():
        out = batch_norm2d(Tensor(x), Tensor(gamma), Tensor(beta), fresh_stats(),
                           training=training)
        return float(((out.data - target) ** 2).sum())

    tx, tg, tb = (Tensor(a, requires_grad=True) for a in (x, gamma, beta))
    backward(sq_l2_sum(batch_norm2d(tx, tg, tb, fresh_stats(), training=training),
                       Tensor(target)))
    for analytic, numeric in zip((tx.grad, tg.grad, tb.grad),
                                 numeric_gradient(loss_value, [x, gamma, beta])):
        assert_grads_close(analytic, numeric)


def test_batch_norm_updates_running_stats_in_training_only():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((8, 2, 4, 4)))
    stats = BatchNormStats(2, dtype=np.float64)
    before = stats.mean.copy(), stats.var.copy()
    batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=False)
    np.testing.assert_array_equal(stats.mean, before[0])
    batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True)
    assert not np.array_equal(stats.mean, before[0])


def test_batch_norm_rejects_bad_eps():
    x = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValueError, match="eps"):
        batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     BatchNormStats(2), training=True, eps=0.0)


# ---------------------------------------------------------------------------
# global average pool
# ---------------------------------------------------------------------------

def test_gap_constant_feature():
    x = Tensor(np.full((2, 3, 4, 5), 2.5, dtype=np.float32))
    np.testing.assert_allclose(global_avg_pool(x).data, 2.5)


def test_gap_mean_oracle():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert global_avg_pool(x).data[0, 0] == 2.5


def test_gap_gradient_is_uniform():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)), requires_grad=True)
    backward(sq_l2_sum(global_avg_pool(x), Tensor(np.zeros((2, 3)))))
    pooled = x.data.mean(axis=(2, 3))
    np.testing.assert_allclose(x.grad, np.broadcast_to(
        (2 * pooled / 16)[:, :, None, None], x.shape))


# ---------------------------------------------------------------------------
# softmax cross entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((4, 10)))
    loss = softmax_cross_entropy(logits, np.array([0, 3, 5, 9]))
    np.testing.assert_allclose(loss.item(), np.log(10.0), atol=1e-6)
    assert abs(loss.item() - 2.302585) < 1e-5


def test_ce_huge_margin_is_near_zero():
    logits = np.full((2, 5), -100.0)
    logits[0, 1] = logits[1, 4] = 100.0
    loss = softmax_cross_entropy(Tensor(logits), np.array([1, 4]))
    assert loss.item() < 1e-8


def test_ce_matches_two_pass_oracle():
    rng = np.random.default_rng(21)
    logits = rng.standard_normal((16, 7)) * 5
    labels = rng.integers(0, 7, size=16)
    loss = softmax_cross_entropy(Tensor(logits), labels)
    np.testing.assert_allclose(loss.item(), softmax_ce_two_pass(logits, labels), rtol=1e-6)


def test_ce_gradients_match_finite_differences():
    rng = np.random.default_rng(22)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)

    def loss_value():
        return softmax_ce_two_pass(logits, labels)

    t = Tensor(logits, requires_grad=True)
    backward(softmax_cross_entropy(t, labels))
    assert_grads_close(t.grad, numeric_gradient(loss_value, [logits])[0])


def test_ce_rejects_out_of_range_labels():
    with pytest.raises(ValueError, match="labels"):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


@given(st.floats(-50, 50))
@settings(max_examples=25, deadline=None)
def test_ce_invariant_to_constant_logit_shift(shift):
    rng = np.random.default_rng(33)
    logits = rng.standard_normal((6, 8))
    labels = rng.integers(0, 8, size=6)
    base = softmax_cross_entropy(Tensor(logits), labels).item()
    shifted = softmax_cross_entropy(Tensor(logits + shift), labels).item()
    assert abs(base - shifted) < 1e-9


# ---------------------------------------------------------------------------
# sq_l2_sum
# ---------------------------------------------------------------------------

def test_sq_l2_sum_of_equal_tensors_is_zero():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert sq_l2_sum(Tensor(x), Tensor(x.copy())).item() == 0.0


def test_sq_l2_sum_direct_arithmetic():
    assert sq_l2_sum(Tensor(np.array([2.0])), Tensor(np.array([0.0]))).item() == 4.0


def test_sq_l2_sum_matches_loop_oracle():
    rng = np.random.default_rng(14)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    np.testing.assert_allclose(sq_l2_sum(Tensor(a), Tensor(b)).item(),
                               sq_l2_loop(a, b), rtol=1e-12)


def test_sq_l2_sum_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        sq_l2_sum(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_sq_l2_sum_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 5))
    b = a + rng.standard_normal((2, 5)) * rng.integers(0, 2)
    val = sq_l2_sum(Tensor(a), Tensor(b)).item()
    assert val >= 0.0
    assert (val == 0.0) == bool(np.array_equal(a, b))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum_like_loss_gives_ones():
    # sq_l2_sum against the constant (x0 - 0.5) has gradient 2*(x - x0 + 0.5),
    # which is exactly all-ones at x = x0 (locally identical to sum(x)).
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    backward(sq_l2_sum(x, Tensor(x.data - 0.5)))
    np.testing.assert_allclose(x.grad, np.ones_like(x.data))


def test_backward_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    target = rng.standard_normal((1, 2, 4, 4))

    def loss_value():
        out = np.maximum(conv2d_loops(x, w, None, 1, 1), 0.0)
        return float(((out - target) ** 2).sum())

    tx = Tensor(x, requires_grad=True)
    tw = Tensor(w, requires_grad=True)
    loss = sq_l2_sum(relu(conv2d(tx, tw, padding=1)), Tensor(target))
    backward(loss)
    for analytic, numeric in zip((tx.grad, tw.grad), numeric_gradient(loss_value, [x, w])):
        assert_grads_close(analytic, numeric)


def test_backward_accumulates_on_repeated_calls():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3)), requires_grad=True)
    loss = sq_l2_sum(x, Tensor(np.zeros((2, 3))))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(mul_const(x, np.ones((2, 2))))


def test_no_grad_on_requires_grad_false():
    x = Tensor(np.ones((2, 2)), requires_grad=False)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(sq_l2_sum(add(x, y), Tensor(np.zeros((2, 2)))))
    assert x.grad is None
    assert y.grad is not None


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------

def test_sgd_plain_step():
    p = Parameter("w", np.array([1.0, 2.0], dtype=np.float32))
    p.tensor.grad = np.array([0.5, -0.5], dtype=np.float32)
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [1.0 - 0.05, 2.0 + 0.05])
    assert p.tensor.grad is None


def test_sgd_momentum_two_steps():
    p = Parameter("w", np.array([0.0], dtype=np.float32))
    g = np.array([1.0], dtype=np.float32)
    lr = 0.1
    p.tensor.grad = g.copy()
    sgd_step([p], lr=lr, momentum=0.9)
    first = -p.data[0]
    p.tensor.grad = g.copy()
    before = p.data[0]
    sgd_step([p], lr=lr, momentum=0.9)
    second = before - p.data[0]
    # hand-unrolled recurrence: buf1 = g, buf2 = 0.9 g + g = 1.9 g
    np.testing.assert_allclose(first, lr * 1.0, rtol=1e-6)
    np.testing.assert_allclose(second, lr * 1.9, rtol=1e-6)


def test_sgd_weight_decay_pure_decay():
    p = Parameter("w", np.array([2.0], dtype=np.float32))
    p.tensor.grad = np.array([0.0], dtype=np.float32)
    sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(p.data, 2.0 * (1 - 0.1 * 0.5), rtol=1e-6)


def test_sgd_skips_and_reports_missing_grads():
    p1 = Parameter("has_grad", np.array([1.0], dtype=np.float32))
    p2 = Parameter("no_grad", np.array([1.0], dtype=np.float32))
    p1.tensor.grad = np.array([1.0], dtype=np.float32)
    skipped = sgd_step([p1, p2], lr=0.1)
    assert skipped == ["no_grad"]
    np.testing.assert_array_equal(p2.data, [1.0])


def test_sgd_converges_on_quadratic():
    # f(x) = x^2 from x=1, lr=0.4: monotone toward 0
    p = Parameter("x", np.array([1.0], dtype=np.float32))
    values = [abs(p.data[0])]
    for _ in range(20):
        p.tensor.grad = 2.0 * p.data
        sgd_step([p], lr=0.4)
        values.append(abs(p.data[0]))
    assert all(b < a or b == 0 for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-6
