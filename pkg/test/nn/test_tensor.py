import numpy as np
import pytest

from cbct_toxicity.nn.gradcheck import gradcheck
from cbct_toxicity.nn.tensor import ShapeError, Tensor, concatenate, no_grad, stack


def test_product_rule():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0, 7.0])
    np.testing.assert_array_equal(b.grad, [2.0, 3.0])


def test_gradients_accumulate_over_reuse():
    x = Tensor(3.0, requires_grad=True)
    (x * x + x).backward()
    assert float(x.grad) == 7.0


def test_broadcast_gradient_is_reduced():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_no_grad_builds_no_graph():
    x = Tensor(1.0, requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_scalar_backward_needs_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_getitem_scatters_repeated_indices():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_stack_and_concatenate_split_gradients():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    (stack([a, b]) * Tensor(np.array([1.0, 2.0]).reshape(2, 1, 1))).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full((2, 2), 2.0))
    a.grad = b.grad = None
    joined = concatenate([a, b], axis=1)
    assert joined.shape == (2, 4)
    (joined * joined).sum().backward()
    np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.0))


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: (x.exp() * x.sin()).sum(),
        lambda x: (x * x + 1.0).sqrt().log().mean(),
        lambda x: (x.reshape(3, 2).T @ x.reshape(3, 2)).sum(),
        lambda x: (1.0 / (x * x + 2.0)).cos().sum(),
    ],
)
def test_elementwise_ops_match_finite_differences(fn):
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, 6))
    assert gradcheck(fn, [x]).passed
