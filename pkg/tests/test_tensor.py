import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invpaint import tensor as T
from util import check_grad


def test_elementwise_mul_example():
    a = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = T.Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    out = T.elementwise("mul", a, b)
    np.testing.assert_array_equal(out.data, [[0.0, 2.0], [3.0, 0.0]])


def test_add_mul_identities():
    x = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_array_equal(T.add(x, np.zeros_like(x.data)).data, x.data)
    np.testing.assert_array_equal(T.mul(x, np.ones_like(x.data)).data, x.data)


def test_shape_mismatch_reports_both_shapes():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros((4, 5)))
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.add(a, b)


def test_broadcast_symmetry():
    a = T.Tensor(np.ones((2, 1, 4)))
    b = T.Tensor(np.ones((3, 1)))
    assert T.mul(a, b).shape == T.mul(b, a).shape == (2, 3, 4)


def test_backward_quadratic():
    x = T.param(np.array([3.0]))
    loss = T.tsum(T.square(x))
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_detached_constant_gets_zero():
    x = T.param(np.array([1.0, 2.0]))
    c = T.Tensor(np.array([5.0]))
    loss = T.tsum(c)
    grads = T.backward(loss, params=[x])
    np.testing.assert_array_equal(grads[id(x)], [0.0, 0.0])


def test_backward_rejects_nonscalar():
    x = T.param(np.ones((2, 2)))
    with pytest.raises(T.ShapeError):
        T.backward(T.square(x))


def test_no_grad_blocks_graph():
    x = T.param(np.ones(3))
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


def test_where_mask_bit_exact_and_grad():
    rng = np.random.default_rng(1)
    a = T.param(rng.standard_normal((2, 3)))
    b = T.param(rng.standard_normal((2, 3)))
    m = (rng.random((2, 3)) > 0.5).astype(np.float64)
    out = T.where_mask(m, a, b)
    assert (out.data[m == 1] == a.data[m == 1]).all()
    assert (out.data[m == 0] == b.data[m == 0]).all()
    T.backward(T.tsum(out))
    np.testing.assert_array_equal(a.grad, m)
    np.testing.assert_array_equal(b.grad, 1 - m)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.tmean(T.square(x)),
        lambda x: T.tsum(T.mul(x, x)),
        lambda x: T.tmean(T.silu(x)),
        lambda x: T.tmean(T.relu(T.add(x, 0.1))),
        lambda x: T.tmean(T.tabs(T.add(x, 0.05))),
        lambda x: T.tmean(T.tsqrt(T.add(T.square(x), 1.0))),
        lambda x: T.tmean(T.square(T.tmean(x, axes=(1,), keepdims=True))),
        lambda x: T.tmean(T.square(T.upsample_nearest(T.reshape(x, (2, 1, 3, 4)), 2))),
    ],
)
def test_grad_matches_finite_differences(fn):
    x0 = np.random.default_rng(7).standard_normal((2, 3, 4))
    check_grad(fn, x0)


def test_conv_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 2, 3, 3)) * 0.4

    def fn(x):
        return T.tmean(T.square(T.conv2d(x, T.Tensor(w), stride=2, pad=1)))

    check_grad(fn, rng.standard_normal((2, 2, 6, 6)))

    x = rng.standard_normal((2, 2, 6, 6))

    def fn_w(wt):
        return T.tmean(T.square(T.conv2d(T.Tensor(x), wt, stride=1, pad=1)))

    check_grad(fn_w, w)


def test_matmul_and_softmax_ce_grads():
    rng = np.random.default_rng(5)
    b = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1, 0])

    def fn(a):
        return T.tmean(T.square(T.matmul(a, T.Tensor(b))))

    check_grad(fn, rng.standard_normal((5, 4)))

    def fn_ce(logits):
        return T.softmax_cross_entropy(logits, labels)

    check_grad(fn_ce, rng.standard_normal((5, 3)))


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=12),
    st.lists(st.floats(-10, 10), min_size=1, max_size=12),
)
def test_add_commutes_and_mul_distributes(xs, ys):
    n = min(len(xs), len(ys))
    a = T.Tensor(np.array(xs[:n]))
    b = T.Tensor(np.array(ys[:n]))
    np.testing.assert_array_equal(T.add(a, b).data, T.add(b, a).data)
    np.testing.assert_allclose(
        T.mul(T.add(a, b), 2.0).data,
        T.add(T.mul(a, 2.0), T.mul(b, 2.0)).data,
        rtol=1e-12,
    )
