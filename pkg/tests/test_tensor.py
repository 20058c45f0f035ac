import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointcaps import reference as ref
from pointcaps import tensor as T
from pointcaps.exceptions import ContractError, DimensionError, NonFiniteError, TapeError
from pointcaps.gradcheck import check_op, relative_error


def rand(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


# forward values ------------------------------------------------------------------

def test_conv1d_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    out = T.conv1d_feature(np.zeros((5, 4)), rng.normal(size=(3, 1, 4)), np.zeros(3))
    assert np.all(out.data == 0)


def test_conv1d_one_hot_row_selects_kernel_column():
    rng = np.random.default_rng(1)
    kernels = rng.normal(size=(3, 1, 6))
    x = np.zeros((1, 6))
    x[0, 4] = 1.0
    out = T.conv1d_feature(x, kernels, np.zeros(3))
    np.testing.assert_array_equal(out.data[0], kernels[:, 0, 4])


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 1, 4)), rng.normal(size=2)
    np.testing.assert_allclose(T.conv1d_feature(x, k, b).data, ref.conv1d_feature(x, k, b), atol=1e-12)


def test_conv1d_rejects_width_mismatch():
    with pytest.raises(DimensionError):
        T.conv1d_feature(np.zeros((3, 4)), np.zeros((2, 1, 5)))


@pytest.mark.parametrize("width,n,expected", [(32, 4, 8), (64 * 16, 16, 64)])
def test_conv_output_width(width, n, expected):
    assert T.conv_output_width(width, n, n) == expected
    out = T.conv2d_strided(np.zeros((2, width, 1)), np.zeros((3, 1, n)), n)
    assert out.shape == (2, expected, 3)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_strided_matches_sliding_window(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(3, 12, 1)), rng.normal(size=(5, 1, 4))
    np.testing.assert_allclose(T.conv2d_strided(x, k, 4).data, ref.conv2d_strided(x, k, 4), atol=1e-12)


def test_conv2d_strided_requires_divisible_width():
    with pytest.raises(DimensionError):
        T.conv2d_strided(np.zeros((1, 10, 1)), np.zeros((2, 1, 4)), 4)


def test_deconv_width_multiplies_width():
    out = T.deconv_width(np.zeros((128, 1)), np.zeros((1, 4, 32)), 4)
    assert out.shape == (512, 32)
    out = T.deconv_width(out, np.zeros((32, 4, 64)), 4)
    assert out.shape == (2048, 64)


@pytest.mark.parametrize("kernel,stride", [(4, 4), (1, 1)])
def test_deconv_width_matches_loops(kernel, stride):
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, kernel, 2)), rng.normal(size=2)
    np.testing.assert_allclose(T.deconv_width(x, w, stride, b).data, ref.deconv_width(x, w, stride, b),
                               atol=1e-12)


def test_deconv_1x1_is_matmul():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(7, 5)), rng.normal(size=(5, 1, 3))
    np.testing.assert_allclose(T.deconv_width(x, w, 1).data, x @ w[:, 0, :], atol=1e-12)


def test_deconv_rejects_overlapping_kernel():
    from pointcaps.exceptions import ConfigurationError

    with pytest.raises(ConfigurationError):
        T.deconv_width(np.zeros((4, 2)), np.zeros((2, 3, 2)), 2)


def test_softmax_uniform_and_saturation():
    np.testing.assert_allclose(T.softmax(np.zeros(4)).data, [0.25] * 4)
    np.testing.assert_allclose(T.softmax(np.array([800.0, 0.0])).data, [1.0, 0.0], atol=1e-300)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_matches_formula(seed):
    row = np.random.default_rng(seed).normal(size=7) * 3
    assert np.max(np.abs(T.softmax(row).data - ref.softmax_row(row.tolist()))) < 1e-12


@pytest.mark.parametrize("norm,expected", [(0.0, 0.0), (1.0, 0.5), (3.0, 0.9)])
def test_squash_norms(norm, expected):
    direction = np.array([2.0, -1.0, 2.0]) / 3.0
    out = T.squash(direction * norm).data
    assert np.linalg.norm(out) == pytest.approx(expected, abs=1e-8)


def test_swish_values():
    assert T.swish(np.array(0.0)).item() == 0.0
    assert T.swish(np.array(50.0)).item() == pytest.approx(50.0)
    assert T.swish(np.array(1.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert T.swish(np.array(1.0)).item() == pytest.approx(0.731059, abs=1e-6)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.exp(np.array([1000.0]))


# invariants -----------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_is_a_simplex(x):
    out = T.softmax(x).data
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.abs(out.sum(-1) - 1) < 1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)),
       st.floats(1.01, 5.0))
def test_squash_norm_below_one_and_monotone(v, factor):
    n1 = np.linalg.norm(T.squash(v).data)
    n2 = np.linalg.norm(T.squash(v * factor).data)
    assert n1 < 1 and n2 < 1
    if np.linalg.norm(v) > 1e-3:
        assert n2 > n1 or n1 > 1 - 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_conv1d_row_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(9, 5)), rng.normal(size=(4, 1, 5)), rng.normal(size=4)
    perm = rng.permutation(9)
    np.testing.assert_allclose(T.conv1d_feature(x[perm], k, b).data,
                               T.conv1d_feature(x, k, b).data[perm], atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_conv_linearity(seed):
    rng = np.random.default_rng(seed)
    a, c = rng.normal(size=2)
    x, y = rng.normal(size=(2, 3, 8, 1))
    k = rng.normal(size=(5, 1, 4))
    lhs = T.conv2d_strided(a * x + c * y, k, 4).data
    rhs = a * T.conv2d_strided(x, k, 4).data + c * T.conv2d_strided(y, k, 4).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10
    x1, y1 = rng.normal(size=(2, 6, 4))
    k1 = rng.normal(size=(3, 1, 4))
    lhs = T.conv1d_feature(a * x1 + c * y1, k1).data
    rhs = a * T.conv1d_feature(x1, k1).data + c * T.conv1d_feature(y1, k1).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


# gradients ------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_rejects_detached_loss():
    x = T.Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()  # no tape active
    with pytest.raises(TapeError):
        loss.backward()
    with T.Tape() as tape:
        pass
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_tape_is_not_truncated_by_backward():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.square(x).sum()
    n = len(tape)
    tape.backward(loss)
    assert len(tape) == n
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * np.ones(3))
    tape.clear()
    assert len(tape) == 0


def test_squash_norm_loss_matches_finite_differences():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 5))
    x = T.Tensor(x0.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = T.square(T.squash(x)).sum()
    tape.backward(loss)
    from pointcaps.gradcheck import numeric_gradient

    arr = x0.copy()
    (num,) = numeric_gradient(lambda: float((T.squash(arr).data ** 2).sum()), [arr], h=1e-5)
    assert relative_error(x.grad, num) < 1e-6


def test_squash_gradient_finite_at_origin():
    x = T.Tensor(np.zeros(4), requires_grad=True)
    with T.Tape() as tape:
        loss = T.squash(x).sum()
    tape.backward(loss)
    assert np.all(np.isfinite(x.grad))


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / (T.square(b) + 1.0), [(2, 3), (3,)]),
    "square": (T.square, [(5,)]),
    "sqrt": (lambda a: T.sqrt(T.square(a) + 0.5), [(5,)]),
    "exp": (T.exp, [(4,)]),
    "sigmoid": (T.sigmoid, [(6,)]),
    "swish": (T.swish, [(6,)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 4)]),
    "softmax_axis0": (lambda a: T.softmax(a, axis=0), [(3, 4)]),
    "squash": (T.squash, [(3, 5)]),
    "norm": (T.vector_norm, [(3, 5)]),
    "sum": (lambda a: T.tsum(a, axis=1), [(2, 3, 4)]),
    "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [(2, 6)]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "getitem": (lambda a: a[np.array([0, 2, 2])], [(3, 4)]),
    "matmul": (T.matmul, [(2, 3, 4), (4, 5)]),
    "einsum": (lambda a, b: T.einsum("bid,iade->biae", a, b), [(2, 3, 4), (3, 2, 4, 5)]),
    "einsum_reduce": (lambda a, b: T.einsum("ij,jk->i", a, b), [(2, 3), (3, 4)]),
    "conv1d": (T.conv1d_feature, [(2, 3, 4), (5, 1, 4), (5,)]),
    "conv2d": (lambda a, k: T.conv2d_strided(a, k, 4), [(2, 8, 1), (3, 1, 4)]),
    "deconv": (lambda a, w, b: T.deconv_width(a, w, 4, b), [(2, 3, 2), (2, 4, 3), (3,)]),
    "deconv1": (lambda a, w: T.deconv_width(a, w, 1), [(3, 2), (2, 1, 3)]),
    "relu": (lambda a: T.relu(a + 0.05), [(6,)]),
    "chamfer": (T.chamfer, [(2, 6, 3), (2, 5, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        worst = max(worst, check_op(fn, [rand(rng, *s) for s in shapes], seed=seed))
    assert worst < 1e-5, f"{name}: relative error {worst:.2e}"
