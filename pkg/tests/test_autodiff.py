import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hcmamba import autodiff as ad
from hcmamba.autodiff import Tensor, backward, grad_check
from hcmamba.errors import ContractError, DimensionError, DomainError, TapeError


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


# -- forward values ---------------------------------------------------------

def test_matmul_identity_and_small_product():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(eye, b).data, b.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_silu_and_softplus_at_zero():
    assert ad.silu(Tensor(0.0)).item() == 0.0
    assert ad.softplus(Tensor(0.0, dtype=np.float64)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_softplus_is_overflow_safe():
    with np.errstate(over="raise"):
        out = ad.softplus(Tensor([-1000.0, 0.0, 1000.0], dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.0, math.log(2), 1000.0])


def test_silu_gradient_at_one_matches_difference_quotient():
    x = leaf(1.0)
    backward(ad.silu(x))
    h = 1e-6
    f = lambda v: v / (1 + math.exp(-v))
    assert x.grad == pytest.approx((f(1 + h) - f(1 - h)) / (2 * h), abs=1e-6)


def test_elementwise_dispatch_and_errors():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert ad.elementwise("mul", a, b).data.tolist() == [3.0, 8.0]
    assert ad.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    with pytest.raises(ContractError):
        ad.elementwise("tanh", a)
    with pytest.raises(DimensionError):
        ad.elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_layer_norm_examples(rng):
    c = Tensor(np.full((2, 4), 3.0))
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ad.layer_norm(c, g, b).data, 0.0)
    out = ad.layer_norm(Tensor([1.0, 3.0], dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)
    x = Tensor(rng.normal(size=(2, 8, 16)), dtype=np.float64)
    y = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-4


def test_layer_norm_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_bilinear_upsample_preserves_constants_and_matches_oracle():
    x = np.arange(6.0).reshape(1, 2, 3, 1)
    y = ad.upsample_bilinear(Tensor(x, dtype=np.float64), 2).data[0, :, :, 0]
    # half-pixel centres, edge clamped: output row i samples input coordinate (i + 0.5)/2 - 0.5
    def sample(r, c):
        r, c = min(max(r, 0), 1), min(max(c, 0), 2)
        r0, c0 = int(math.floor(r)), int(math.floor(c))
        r1, c1 = min(r0 + 1, 1), min(c0 + 1, 2)
        fr, fc = r - r0, c - c0
        v = x[0, :, :, 0]
        return ((1 - fr) * (1 - fc) * v[r0, c0] + (1 - fr) * fc * v[r0, c1]
                + fr * (1 - fc) * v[r1, c0] + fr * fc * v[r1, c1])
    expected = [[sample((i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5) for j in range(6)] for i in range(4)]
    np.testing.assert_allclose(y, expected, atol=1e-12)
    const = ad.upsample_bilinear(Tensor(np.full((1, 2, 2, 3), 7.0)), 4).data
    np.testing.assert_allclose(const, 7.0)


# -- backward semantics -----------------------------------------------------

def test_linear_case_gradient_is_input():
    w = leaf([0.5, -1.0, 2.0])
    x = np.array([3.0, 4.0, 5.0])
    backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x)


def test_silu_of_matmul_gradcheck(rng):
    W, x = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    report = grad_check(lambda a, b: ad.silu(ad.matmul(a, b)).sum(), [W, x])
    assert report.max_error < 1e-4, report


def test_disjoint_graphs_leave_other_grads_absent():
    a, b = leaf([1.0, 2.0]), leaf([3.0])
    la = (a * a).sum()
    _ = (b * 2.0).sum()
    backward(la)
    assert a.grad is not None and b.grad is None


def test_grads_accumulate_over_reuse():
    x = leaf(3.0)
    backward(x * x + x)
    assert x.grad == pytest.approx(7.0)


def test_non_scalar_loss_is_rejected():
    with pytest.raises(ContractError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_detached_loss_is_rejected():
    with pytest.raises(TapeError):
        backward(Tensor([1.0, 2.0]).sum())


def test_double_backward_is_a_hard_error():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_stale_leaf_gradient_must_be_reset():
    x = leaf([1.0, 2.0])
    backward((x * x).sum())
    with pytest.raises(TapeError):
        backward((x * 3.0).sum())
    x.zero_grad()
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_debug_mode_flags_non_finite_results():
    ad.set_debug(True)
    try:
        with pytest.raises(DomainError), np.errstate(invalid="ignore"):
            ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug(False)


def test_default_dtype_context():
    with ad.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(3, 7)).astype(np.float32)
    w = rng.normal(size=(7, 5)).astype(np.float32)
    a = ad.softmax(ad.linear(Tensor(x), Tensor(w)), axis=-1).data
    b = ad.softmax(ad.linear(Tensor(x), Tensor(w)), axis=-1).data
    assert a.tobytes() == b.tobytes()


# -- grad_check itself ------------------------------------------------------

def test_grad_check_on_polynomial():
    report = grad_check(lambda x: (x * x).sum(), [np.array([1.0, 2.0, 3.0])])
    assert report.passed and report.max_error < 1e-8


def test_grad_check_catches_wrong_backward_rule():
    def bad_square(x):
        return Tensor.from_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")
    report = grad_check(lambda x: bad_square(x).sum(), [np.array([1.0, 2.0, 3.0])])
    assert not report.passed


def test_grad_check_names_input_on_non_finite_output():
    with pytest.raises(DomainError, match="input 1"):
        # finite at the base point, but the step pushes log's argument negative
        with np.errstate(invalid="ignore"):
            grad_check(lambda a, b: (a * ad.log(b)).sum(), [np.ones(2), np.array([1.0, 1e-5])])


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-3, 3)))
def test_broadcast_gradient_sums_over_repeated_axis(a):
    A = leaf(a)
    b = leaf(np.zeros(a.shape[1]))
    backward((A * 2.0 + b).sum())
    np.testing.assert_array_equal(b.grad, np.full(a.shape[1], float(a.shape[0])))
    np.testing.assert_array_equal(A.grad, np.full(a.shape, 2.0))
