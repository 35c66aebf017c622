import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artifact.conv import avg_pool2, conv, conv_transpose2, pool_and_resize, upsample_nearest2
from artifact.gradcheck import check_gradients, relative_error
from artifact.optim import Adam, AdamState, NonFiniteGradientError, adam_step
from artifact.sparse import SystemMatrix, sparse_apply
from artifact.tensor import (
    Tensor, activation, backward, clamp, computation_record, concat, elementwise, exp, leaky_relu,
    mean, mul, no_grad, reshape, sigmoid, softmax, square, sub, tsum, transpose,
)
import scipy.sparse as sp


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# --- elementwise ----------------------------------------------------------


def test_mean_square_symmetric_values():
    assert mean(square(Tensor([1.0, -1.0]))).item() == 1.0


def test_add_zero_is_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(elementwise("add", Tensor(x), 0.0).data, x)


def test_square_gradient_at_three():
    x = leaf([3.0])
    backward(tsum(square(x)))
    assert x.grad[0] == 6.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_elementwise_dispatch_covers_kinds(rng):
    a = Tensor(rng.standard_normal(5))
    b = Tensor(rng.standard_normal(5))
    np.testing.assert_allclose(elementwise("sub", a, b).data, a.data - b.data)
    np.testing.assert_allclose(elementwise("mul", a, b).data, a.data * b.data)
    np.testing.assert_allclose(elementwise("square", a).data, a.data ** 2)
    np.testing.assert_allclose(elementwise("clamp", a, lo=-0.1, hi=0.1).data, np.clip(a.data, -0.1, 0.1))
    assert elementwise("sum", a).item() == pytest.approx(a.data.sum())
    assert elementwise("mean", a).item() == pytest.approx(a.data.mean())
    with pytest.raises(ValueError):
        elementwise("pow", a, b)


# --- activations ------------------------------------------------------------


def test_sigmoid_zero():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5


def test_softmax_equal_logits():
    out = softmax(Tensor(np.zeros((1, 4, 3, 3))), axis=1).data
    np.testing.assert_array_equal(out, np.full((1, 4, 3, 3), 0.25))


def test_leaky_relu_negative_one():
    assert leaky_relu(Tensor([-1.0])).data[0] == pytest.approx(-0.2, abs=0)


def test_activation_dispatch(rng):
    x = Tensor(rng.standard_normal((2, 4, 3)))
    assert np.all((activation("sigmoid", x).data > 0) & (activation("sigmoid", x).data < 1))
    np.testing.assert_allclose(activation("softmax", x).data.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        activation("softmax", Tensor([1.0]))
    with pytest.raises(ValueError):
        activation("tanh", x)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 4, 3), elements=st.floats(-50, 50)))
def test_sigmoid_range_and_softmax_sums(x):
    s = sigmoid(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-12)


# --- convolution --------------------------------------------------------------


def test_conv_unit_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    np.testing.assert_array_equal(conv(Tensor(x), Tensor(w)).data, x)


def test_conv_zero_input_gives_zero_output_and_kernel_grad(rng):
    w = leaf(rng.standard_normal((4, 2, 3, 3, 3)))
    out = conv(Tensor(np.zeros((1, 2, 5, 5, 5))), w, padding=1)
    assert not out.data.any()
    backward(tsum(out))
    assert not w.grad.any()


@pytest.mark.parametrize("dims,stride,padding", [(2, 1, 1), (2, 2, 1), (3, 1, 1), (3, 2, 1), (3, 1, 0)])
def test_conv_output_size(dims, stride, padding, rng):
    size = 7
    x = Tensor(rng.standard_normal((1, 2) + (size,) * dims))
    w = Tensor(rng.standard_normal((3, 2) + (3,) * dims))
    expect = (size + 2 * padding - 3) // stride + 1
    assert conv(x, w, stride=stride, padding=padding).shape == (1, 3) + (expect,) * dims


def test_conv_kernel_larger_than_input_rejected():
    with pytest.raises(ValueError):
        conv(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        conv(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("dims,stride,cin", [(2, 1, 2), (2, 1, 5), (2, 2, 3), (3, 1, 2), (3, 1, 5), (3, 2, 2)])
def test_conv_gradients_match_finite_differences(dims, stride, cin, rng):
    x = leaf(rng.uniform(-1, 1, (2, cin) + (5,) * dims))
    w = leaf(rng.uniform(-1, 1, (3, cin) + (3,) * dims))
    b = leaf(rng.uniform(-1, 1, 3))
    wt = rng.standard_normal(conv(x, w, b, stride, 1).shape)
    res = check_gradients(lambda: tsum(mul(conv(x, w, b, stride, 1), wt)), [x, w, b])
    assert res.max_rel_error < 1e-6


# --- pooling / resizing -------------------------------------------------------------


def test_avg_pool_constant():
    out = pool_and_resize(Tensor(np.full((1, 2, 4, 4), 3.5)), "avg-pool-2").data
    np.testing.assert_array_equal(out, np.full((1, 2, 2, 2), 3.5))


def test_upsample_then_pool_identity_on_constant():
    x = np.full((1, 1, 3, 3, 2), -1.25)
    out = pool_and_resize(pool_and_resize(Tensor(x), "nearest-upsample-2"), "avg-pool-2").data
    np.testing.assert_array_equal(out, x)


def test_avg_pool_direct_mean():
    assert avg_pool2(Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])).data.item() == 4.0


def test_avg_pool_odd_size_rejected():
    with pytest.raises(ValueError):
        avg_pool2(Tensor(np.zeros((1, 1, 5, 4))))


def test_resize_gradients(rng):
    x = leaf(rng.uniform(-1, 1, (1, 2, 4, 4, 2)))
    k = leaf(rng.uniform(-1, 1, (2, 3, 2, 2, 2)))
    b = leaf(rng.uniform(-1, 1, 3))
    for fn, params in (
        (lambda: tsum(square(avg_pool2(x))), [x]),
        (lambda: tsum(square(upsample_nearest2(x))), [x]),
        (lambda: tsum(square(conv_transpose2(x, k, b))), [x, k, b]),
    ):
        assert check_gradients(fn, params).max_rel_error < 1e-6


def test_transpose_conv_doubles_size(rng):
    out = pool_and_resize(Tensor(rng.standard_normal((1, 2, 3, 3))), "transpose-conv-2",
                          Tensor(rng.standard_normal((2, 4, 2, 2))))
    assert out.shape == (1, 4, 6, 6)


# --- backward ---------------------------------------------------------------------


def test_sum_gives_all_ones(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_disconnected_leaf_keeps_zero_grad(rng):
    x = leaf(rng.standard_normal(3))
    y = leaf(rng.standard_normal(3))
    backward(tsum(square(x)))
    assert y.grad is None or not np.any(y.grad)


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        backward(square(leaf([1.0, 2.0])))


def test_gradients_accumulate_until_zeroed():
    x = leaf([2.0])
    backward(tsum(square(x)))
    backward(tsum(square(x)))
    assert x.grad[0] == 8.0
    x.zero_grad()
    backward(tsum(square(x)))
    assert x.grad[0] == 4.0


def test_composite_weighted_objective_gradients(rng):
    """Toy instance of a five-term weighted objective built from the primitives."""
    w = leaf(rng.uniform(-1, 1, (2, 1, 3, 3)))
    x = Tensor(rng.uniform(0, 1, (1, 1, 6, 6)))
    y = rng.uniform(0, 1, (1, 2, 6, 6))
    lam = (0.1, 10.0, 10.0, 2.0, 0.5)

    def loss():
        out = sigmoid(conv(x, w, padding=1))
        d = mean(out)
        terms = [
            square(sub(d, 1.0)),
            mean(square(sub(out, y))),
            mean(square(sub(tsum(out, axis=2), y.sum(axis=2)))),
            sub(1.0, mean(softmax(out, axis=1))),
            mean(square(sub(avg_pool2(out), avg_pool2(Tensor(y))))),
        ]
        total = None
        for l, t in zip(lam, terms):
            total = mul(t, l) if total is None else total + mul(t, l)
        return reshape(total, ())

    assert check_gradients(loss, [w]).max_rel_error < 1e-6


def test_computation_record_is_topological(rng):
    x = leaf(rng.standard_normal(4))
    loss = tsum(square(exp(x)) * 2.0)
    recs = computation_record(loss)
    produced = set()
    for r in recs:
        for t in r.inputs:
            assert t.is_leaf or id(t) in produced or not t.requires_grad
        produced.add(id(r.output))
    assert recs[-1].output is loss


def test_no_grad_records_nothing(rng):
    x = leaf(rng.standard_normal(3))
    with no_grad():
        y = square(x)
    assert not y.requires_grad and y.is_leaf


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1, 1)), st.sampled_from(["exp", "clamp", "transpose", "concat", "getitem", "div"]))
def test_unary_gradients_property(x, op):
    t = leaf(x + 0.0)
    fns = {
        "exp": lambda: tsum(exp(t)),
        "clamp": lambda: tsum(square(clamp(t, -0.5, 0.5))),
        "transpose": lambda: tsum(mul(transpose(t, (1, 0)), np.arange(12.0).reshape(4, 3))),
        "concat": lambda: tsum(square(concat([t, mul(t, 2.0)], axis=0))),
        "getitem": lambda: tsum(square(t[1:, ::2])),
        "div": lambda: tsum(t / (square(t) + 1.0)),
    }
    res = check_gradients(fns[op], [t])
    ok = (res.rel_error < 1e-6) | (np.abs(res.analytic) + np.abs(res.numeric) < 1e-9)
    if op == "clamp":
        # central differences straddle the kinks at +-0.5
        ok |= np.abs(np.abs(x.reshape(-1)) - 0.5) < 1e-4
    assert np.all(ok)


# --- Adam -------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = leaf([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.state.t == 1


def test_adam_first_step_moves_by_lr():
    p = leaf([0.5])
    state = AdamState.for_params([p], lr=0.1, beta1=0.9, beta2=0.999)
    adam_step(state, [p], [np.ones(1)])
    assert p.data[0] == pytest.approx(0.5 - 0.1, abs=1e-8)


def _adam_oracle(theta, grads, lr, b1, b2, eps):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_reference_over_two_steps(rng):
    theta = rng.standard_normal(6)
    g = rng.standard_normal(6)
    p = leaf(theta.copy())
    state = AdamState.for_params([p], lr=2e-4, beta1=0.5, beta2=0.999)
    adam_step(state, [p], [g])
    adam_step(state, [p], [g])
    np.testing.assert_allclose(p.data, _adam_oracle(theta, [g, g], 2e-4, 0.5, 0.999, 1e-8), rtol=0, atol=1e-12)


def test_adam_rejects_non_finite_gradient_without_moving():
    a, b = leaf([1.0]), leaf([2.0])
    state = AdamState.for_params([a, b], lr=0.1)
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(state, [a, b], [np.ones(1), np.array([np.nan])])
    assert err.value.param_index == 1
    assert a.data[0] == 1.0 and state.t == 0


def test_adam_state_round_trip(rng):
    p = leaf(rng.standard_normal(4))
    opt = Adam([p], lr=0.01)
    p.grad = rng.standard_normal(4)
    opt.step()
    saved = {k: v.copy() for k, v in opt.state_arrays().items()}
    other = Adam([leaf(np.zeros(4))], lr=0.01)
    other.load_state_arrays(saved)
    assert other.state.t == 1
    np.testing.assert_array_equal(other.state.m[0], opt.state.m[0])


# --- sparse apply -----------------------------------------------------------------


def _random_matrix(rng, rows=7, cols=5):
    m = sp.random(rows, cols, density=0.4, random_state=np.random.RandomState(0), format="csr")
    return SystemMatrix.from_scipy(m, "test")


def test_sparse_identity(rng):
    eye = SystemMatrix.from_scipy(sp.identity(6, format="csr"))
    x = rng.standard_normal(6)
    np.testing.assert_array_equal(sparse_apply(eye, Tensor(x)).data, x)


def test_sparse_zero_vector(rng):
    m = _random_matrix(rng)
    assert not sparse_apply(m, Tensor(np.zeros(5))).data.any()


def test_sparse_adjoint_identity(rng):
    m = _random_matrix(rng)
    for _ in range(20):
        x, y = rng.standard_normal(5), rng.standard_normal(7)
        lhs = sparse_apply(m, Tensor(x)).data @ y
        rhs = x @ sparse_apply(m, Tensor(y), transposed=True).data
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-30)


def test_sparse_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        sparse_apply(_random_matrix(rng), Tensor(np.zeros(6)))


def test_sparse_backward_is_transpose(rng):
    m = _random_matrix(rng)
    x = leaf(rng.standard_normal((5, 3)))
    g = rng.standard_normal((7, 3))
    backward(tsum(mul(sparse_apply(m, x), g)))
    np.testing.assert_allclose(x.grad, m.to_dense().T @ g, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_sparse_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    m = _random_matrix(r)
    x, y = r.standard_normal(5), r.standard_normal(5)
    lhs = m.matvec(a * x + b * y)
    rhs = a * m.matvec(x) + b * m.matvec(y)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(lhs).max()))


def test_deterministic_conv_is_bitwise_repeatable(rng):
    x = rng.standard_normal((6, 5, 6, 6, 6))
    w = rng.standard_normal((4, 5, 3, 3, 3))

    def run():
        xt, wt = leaf(x), leaf(w)
        backward(tsum(square(conv(xt, wt, padding=1))))
        return xt.grad.copy(), wt.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
