import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drda import numerics as nx
from drda.errors import ContractError, NumericError


def grad(out, leaf):
    return nx.evaluate_with_gradients(out, [leaf])[leaf]


def test_square_gradient():
    x = nx.parameter(np.array(3.0))
    assert grad(x * x, x) == pytest.approx(6.0)


def test_constant_output_gives_exact_zero():
    x = nx.parameter(np.array([1.0, 2.0]))
    c = nx.constant(np.array([4.0, 5.0]))
    g = grad(c.sum() * 2.0 + x.sum() * 0.0 + 1.0, x)
    assert np.all(g == 0.0)
    y = nx.parameter(np.array([1.0]))
    g = nx.evaluate_with_gradients(c.sum(), [y])[y]
    assert np.all(g == 0.0)


def test_reused_leaf_accumulates():
    x = nx.parameter(np.array(1.5))
    assert grad(x + x, x) == pytest.approx(2.0)
    assert grad(x * x + x * 3.0, x) == pytest.approx(2 * 1.5 + 3.0)


def test_softmax_ce_gradient_matches_closed_form():
    logits = nx.parameter(np.array([[1.0, 0.0]]))
    loss = -nx.log_softmax(logits)[np.arange(1), np.array([0])].sum()
    g = grad(loss, logits)
    s = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert np.allclose(g, [[s[0] - 1.0, s[1]]], atol=1e-14)

    def build():
        return -nx.log_softmax(logits)[np.arange(1), np.array([0])].sum()

    assert nx.finite_difference_check(build, logits, 1e-5) < 1e-6


def test_non_scalar_output_rejected():
    x = nx.parameter(np.ones(3))
    with pytest.raises(ContractError):
        nx.evaluate_with_gradients(x * 2.0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_nan_gradient_names_op():
    # log is finite at a subnormal input but its derivative overflows
    x = nx.parameter(np.array([1e-320, 1.0]))
    with pytest.raises(NumericError, match="'log'"):
        nx.evaluate_with_gradients(nx.log(x).sum())


def test_non_finite_forward_raises():
    x = nx.parameter(np.array([-1.0]))
    with pytest.raises(NumericError):
        nx.log(x)


def test_fd_linear_is_exact():
    W = nx.parameter(np.arange(6.0).reshape(2, 3) / 7.0)
    x = nx.constant(np.array([[0.3, -1.2]]))

    def build():
        return (x @ W).sum()

    assert nx.finite_difference_check(build, W, 1e-5) < 1e-9


def test_fd_rejects_zero_step():
    x = nx.parameter(np.ones(2))
    with pytest.raises(ContractError):
        nx.finite_difference_check(lambda: x.sum(), x, 0.0)


def test_fd_restores_leaf():
    x = nx.parameter(np.array([0.5, 0.25]))
    before = x.data.copy()
    nx.finite_difference_check(lambda: (x * x).sum(), x)
    assert np.array_equal(x.data, before)


def test_fd_floor_on_zero_gradient():
    # the second entry does not affect the output; a loss with an awkward value leaves round-off in its FD
    x = nx.parameter(np.array([0.3, 0.7]))
    build = lambda: nx.exp(x * nx.constant(np.array([1.0, 0.0]))).sum() * 123.456 + 0.1
    assert nx.finite_difference_check(build, x, floor=1e-6) < 1e-6


def test_bias_add_only_broadcast():
    a = nx.constant(np.ones((2, 3)))
    with pytest.raises(ContractError):
        nx.add(a, nx.constant(np.ones((3, 1))))
    out = a + nx.constant(np.arange(3.0))
    assert out.shape == (2, 3)


def test_matmul_shape_check():
    with pytest.raises(ContractError):
        nx.matmul(nx.constant(np.ones((2, 3))), nx.constant(np.ones((2, 3))))


def test_relu_subgradient_at_zero_is_zero():
    x = nx.parameter(np.array([0.0, 1.0, -1.0]))
    assert np.array_equal(grad(nx.relu(x).sum(), x), [0.0, 1.0, 0.0])


def test_norm_subgradient_at_zero():
    x = nx.parameter(np.zeros(3))
    assert np.array_equal(grad(nx.norm(x), x), np.zeros(3))


def test_forward_deterministic(rng):
    A = rng.uniform(-2, 2, (5, 4))
    B = rng.uniform(-2, 2, (4, 3))
    outs = [nx.softmax(nx.constant(A) @ nx.constant(B)).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


# entries bounded away from 0, plus a denominator floor in the checks: where a true gradient
# cancels to ~0 the plain relative error would only measure round-off
entries = st.floats(-2, 2).filter(lambda v: abs(v) > 0.05)
mats = arrays(np.float64, (3, 4), elements=entries)


@settings(max_examples=25, deadline=None)
@given(mats, mats)
def test_elementwise_backward_matches_fd(a, b):
    A = nx.parameter(a)
    B = nx.constant(b)
    for build in (lambda: (A * B).sum(), lambda: (A + B).sum(), lambda: nx.tsum(nx.exp(A * 0.5)),
                  lambda: (nx.log(A * A + 1.0)).sum(), lambda: (nx.softmax(A) * B).sum(),
                  lambda: (nx.log_softmax(A) * B).sum()):
        assert nx.finite_difference_check(build, A, floor=1e-6) < 1e-6


@settings(max_examples=25, deadline=None)
@given(mats, arrays(np.float64, (4, 2), elements=entries))
def test_matmul_backward_matches_fd(a, b):
    A, B = nx.parameter(a), nx.parameter(b)
    # positive weights: a row of C summing to zero would make a true gradient of exactly 0
    C = nx.constant(np.linspace(0.5, 1.5, 6).reshape(3, 2))

    def build():
        return ((A @ B) * C).sum()

    assert nx.finite_difference_check(build, A, floor=1e-6) < 1e-6
    assert nx.finite_difference_check(build, B, floor=1e-6) < 1e-6


@settings(max_examples=25, deadline=None)
@given(mats)
def test_relu_backward_matches_fd_away_from_kink(a):
    a = np.where(np.abs(a) < 1e-3, 0.5, a)
    A = nx.parameter(a)
    assert nx.finite_difference_check(lambda: (nx.relu(A) * A).sum(), A, floor=1e-6) < 1e-6


def test_mean_transpose_reshape_take(rng):
    X = nx.parameter(rng.uniform(-2, 2, (3, 4)))
    idx = np.array([2, 0, 2])
    for build in (lambda: X.mean(axis=0).sum(), lambda: (X.T @ X).sum(), lambda: nx.reshape(X, (4, 3))[1].sum(),
                  lambda: (X[idx] * X[idx]).sum(), lambda: nx.norm(X, axis=1).sum()):
        assert nx.finite_difference_check(build, X, floor=1e-6) < 1e-6
