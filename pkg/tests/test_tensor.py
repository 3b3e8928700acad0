import math

import numpy as np
import pytest

from mgtlab import tensor as T
from mgtlab.errors import ContractError, DimensionError, InvalidConfigurationError, NumericalError
from mgtlab.gradcheck import numerical_gradient, relative_error, tape_gradient


def t(x, grad=True, name=None):
    return T.Tensor(x, requires_grad=grad, name=name)


def check_grad(fn, *arrays, tol=1e-6, h=1e-5):
    tensors = [t(a, name=f"a{i}") for i, a in enumerate(arrays)]
    analytic = tape_gradient(lambda: fn(*tensors), tensors)
    numeric = numerical_gradient(lambda: fn(*tensors), tensors, h)
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < tol


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(t(np.eye(2)), t(A)).data, A)


def test_matmul_hand_product():
    assert T.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    check_grad(lambda a, b: T.tsum(T.matmul(a, b)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2)))


def test_matmul_batched_against_2d_weight():
    rng = np.random.default_rng(1)
    check_grad(lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.Tensor(np.arange(10.0).reshape(5, 2)))),
               rng.uniform(-1, 1, (2, 5, 3)), rng.uniform(-1, 1, (3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        T.matmul(t(np.ones((2, 3))), t(np.ones((4, 2))))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


# -- elementwise --------------------------------------------------------------------


def test_tanh_sigmoid_at_zero():
    assert T.tanh(t(0.0)).item() == 0.0
    assert T.sigmoid(t(0.0)).item() == 0.5


def test_hadamard_hand_product():
    out = T.elementwise("hadamard", t([1.0, 2.0, 3.0]), t([4.0, 5.0, 6.0]))
    assert out.data.tolist() == [4.0, 10.0, 18.0]


def test_tanh_derivative_at_point():
    x = t(0.3)
    g = tape_gradient(lambda: T.tanh(x), [x])[0]
    h = 1e-5
    fd = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
    assert abs(float(g) - fd) < 1e-8


def test_ranges_hold_for_large_inputs():
    x = t(np.linspace(-50, 50, 101))
    s = T.sigmoid(x).data
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.abs(T.tanh(x).data) <= 1)
    # strictly inside for moderate arguments
    m = T.sigmoid(t(np.linspace(-30, 30, 61))).data
    assert np.all((m > 0) & (m < 1))


@pytest.mark.parametrize("op", ["add", "sub", "hadamard"])
def test_binary_gradients(op):
    rng = np.random.default_rng(2)
    check_grad(lambda a, b: T.tsum(T.elementwise(op, a, b)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4)))


@pytest.mark.parametrize("op", ["tanh", "sigmoid"])
def test_unary_gradients(op):
    rng = np.random.default_rng(3)
    w = T.Tensor(rng.normal(size=(2, 5)))
    check_grad(lambda a: T.tsum(T.mul(T.elementwise(op, a), w)), rng.uniform(-1, 1, (2, 5)))


def test_scale_and_gelu_gradients():
    rng = np.random.default_rng(4)
    check_grad(lambda a: T.tsum(T.elementwise("scale", a, -2.5)), rng.uniform(-1, 1, (4,)))
    check_grad(lambda a: T.tsum(T.gelu(a)), rng.uniform(-3, 3, (3, 3)))


def test_row_vector_broadcast_gradient():
    rng = np.random.default_rng(5)
    check_grad(lambda a, b: T.tsum(T.mul(T.add(a, b), a)), rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4,)))


def test_scalar_broadcast_gradient():
    rng = np.random.default_rng(6)
    check_grad(lambda a, b: T.tsum(T.mul(a, b)), rng.uniform(-1, 1, (2, 3)), np.array(0.7))


@pytest.mark.parametrize("sa,sb", [((3, 4), (3,)), ((3, 4), (4, 3)), ((2, 3), (1, 3)), ((3,), (3, 4))])
def test_broadcast_rejects_non_trailing(sa, sb):
    with pytest.raises(DimensionError):
        T.add(t(np.ones(sa)), t(np.ones(sb)))


def test_unknown_elementwise_op():
    with pytest.raises(ContractError):
        T.elementwise("relu", t(1.0))


# -- layer norm ---------------------------------------------------------------------


def test_layer_norm_constant_row_maps_to_bias():
    out = T.layer_norm(t([[1.0, 1.0, 1.0, 1.0]]), t(np.ones(4)), t(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_hand_value_without_eps():
    out = T.layer_norm(t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-15)


def test_layer_norm_population_variance():
    x = np.array([[1.0, 2.0, 3.0, 6.0]])
    out = T.layer_norm(t(x), t(np.ones(4)), t(np.zeros(4)), eps=0.0).data
    ref = (x - x.mean()) / x.std()  # numpy std is the population form
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_layer_norm_gradient():
    rng = np.random.default_rng(7)
    w = T.Tensor(rng.normal(size=(3, 4)))
    check_grad(lambda x, g, b: T.tsum(T.mul(T.layer_norm(x, g, b), w)),
               rng.uniform(-1, 1, (3, 4)), rng.uniform(0.5, 1.5, (4,)), rng.uniform(-1, 1, (4,)), tol=1e-5)


def test_layer_norm_requires_two_features():
    with pytest.raises(DimensionError):
        T.layer_norm(t([[1.0]]), t([1.0]), t([0.0]))


# -- softmax / cross entropy ----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(t(np.zeros((3, 4))), [0, 1, 3], [True, True, True])
    assert abs(loss.item() - math.log(4)) < 1e-15
    assert abs(loss.item() - 1.386294) < 1e-6


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((2, 3))
        logits[[0, 1], [2, 0]] = margin
        losses.append(T.softmax_cross_entropy(t(logits), [2, 0], [True, True]).item())
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-40


def test_cross_entropy_gradient():
    rng = np.random.default_rng(8)
    check_grad(lambda z: T.softmax_cross_entropy(z, [2, 0], [True, True]), rng.uniform(-1, 1, (2, 3)), tol=1e-5)


def test_cross_entropy_mask_excludes_positions():
    logits = np.array([[5.0, 0.0], [0.0, 5.0]])
    masked = T.softmax_cross_entropy(t(logits), [0, 0], [True, False]).item()
    only_first = T.softmax_cross_entropy(t(logits[:1]), [0], [True]).item()
    assert masked == only_first


def test_cross_entropy_all_false_mask():
    with pytest.raises(InvalidConfigurationError):
        T.softmax_cross_entropy(t(np.zeros((2, 3))), [0, 1], [False, False])


def test_softmax_causal_rows_sum_to_one():
    rng = np.random.default_rng(9)
    p = T.softmax(t(rng.normal(size=(2, 5, 5))), causal=True).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(p[0], 1) == 0)


def test_softmax_gradient():
    rng = np.random.default_rng(10)
    w = T.Tensor(rng.normal(size=(4, 4)))
    check_grad(lambda z: T.tsum(T.mul(T.softmax(z, causal=True), w)), rng.uniform(-1, 1, (4, 4)))


def test_embedding_gradient_accumulates_repeats():
    table = t(np.arange(6.0).reshape(3, 2))
    g = tape_gradient(lambda: T.tsum(T.embedding(table, np.array([0, 2, 0]))), [table])[0]
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_reshape_transpose_mean_gradients():
    rng = np.random.default_rng(11)
    w = T.Tensor(rng.normal(size=(3, 2)))
    check_grad(lambda a: T.mean(T.mul(T.transpose(T.reshape(a, (2, 3)), (1, 0)), w)), rng.uniform(-1, 1, (6,)))


# -- tape semantics ---------------------------------------------------------------------


def test_backward_linear_functional():
    x = t(np.array([[1.0, 2.0], [3.0, 4.0]]))
    g = tape_gradient(lambda: T.tsum(x), [x])[0]
    np.testing.assert_array_equal(g, np.ones((2, 2)))


def test_backward_quadratic():
    x = t(np.array([0.5, -1.5, 2.0]))
    g = tape_gradient(lambda: T.scale(T.tsum(T.mul(x, x)), 0.5), [x])[0]
    np.testing.assert_array_equal(g, x.data)


def test_additive_accumulation_over_reuse():
    x = t(np.array([1.0, 2.0]))
    # x used three times: d/dx (x + x + x*2) = 4
    g = tape_gradient(lambda: T.tsum(T.add(T.add(x, x), T.scale(x, 2.0))), [x])[0]
    np.testing.assert_array_equal(g, [4.0, 4.0])


def test_grad_shape_matches_tensor():
    rng = np.random.default_rng(12)
    a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4,)))
    with T.GradTape():
        loss = T.tsum(T.tanh(T.add(a, b)))
    T.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


def test_backward_rejects_non_scalar():
    x = t(np.ones(3))
    with T.GradTape():
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        T.backward(y)


def test_backward_rejects_untracked_loss():
    x = T.Tensor(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(T.tsum(x))


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        T.Tensor([1.0, float("nan")])
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        T.scale(t([1e300]), 1e300)


def test_forward_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(13)
        a, b = t(rng.normal(size=(4, 5))), t(rng.normal(size=(5, 3)))
        with T.GradTape():
            loss = T.softmax_cross_entropy(T.matmul(T.tanh(a), b), [0, 1, 2, 0], [True] * 4)
        grads = T.backward(loss)
        return loss.data.tobytes(), grads[a].tobytes(), grads[b].tobytes()

    assert run() == run()


def test_inputs_are_copied():
    arr = np.ones(3)
    x = T.Tensor(arr)
    arr[0] = 5.0
    assert x.data[0] == 1.0
