import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqspike import numerics as nx


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def analytic_grad(build, x, w):
    p = nx.param(x, "x")
    loss = nx.sum_all(nx.mul(build(p), w))
    return nx.backward(loss)[p]


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = nx.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out, [[3.0], [4.0]])


def test_matmul_hand_computed():
    out = nx.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1)))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_zero_annihilates():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nx.matmul(np.zeros((2, 3)), x), np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_records_on_tape_only_with_nodes():
    assert isinstance(nx.matmul(np.eye(2), np.eye(2)), np.ndarray)
    assert isinstance(nx.matmul(nx.param(np.eye(2)), np.eye(2)), nx.Node)


# ----------------------------------------------------------------- softmax

def test_softmax_symmetric():
    np.testing.assert_array_equal(nx.softmax_rows(np.zeros(2)), [0.5, 0.5])


def test_softmax_saturates():
    np.testing.assert_allclose(nx.softmax_rows(np.array([1000.0, 0.0])), [1.0, 0.0], atol=1e-12)


def test_softmax_matches_scalar_oracle():
    xs = [1.0, 2.0, 3.0]
    total = math.fsum(math.exp(x) for x in xs)
    expected = [math.exp(x) / total for x in xs]
    np.testing.assert_allclose(nx.softmax_rows(np.array(xs)), expected, rtol=1e-15, atol=1e-16)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(nx.softmax_rows(x).sum(axis=-1), 1.0, atol=1e-10)


# -------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


def test_layer_norm_two_values():
    out = nx.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_zero_gain_gives_shift():
    shift = np.array([0.5, -1.0, 2.0])
    out = nx.layer_norm(np.array([[1.0, 5.0, 2.0], [0.0, 1.0, 9.0]]), np.zeros(3), shift)
    np.testing.assert_array_equal(out, np.broadcast_to(shift, (2, 3)))


def test_layer_norm_shape_check():
    with pytest.raises(nx.DimensionError):
        nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    var = x.var(axis=-1)
    out = nx.layer_norm(x, np.ones(x.shape[-1]), np.zeros(x.shape[-1]))
    for row, v in zip(out, var):
        if v > 1e-6:
            assert abs(row.mean()) < 1e-8
            assert abs(row.var() - 1.0) < 1e-6


# -------------------------------------------------------------------- gelu

def _erf_series(x, terms=60):
    total = math.fsum((-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1)) for n in range(terms))
    return 2.0 / math.sqrt(math.pi) * total


def test_gelu_zero():
    assert nx.gelu(np.array(0.0)) == 0.0


def test_gelu_asymptote():
    assert abs(nx.gelu(np.array(10.0)) - 10.0) < 1e-6


def test_gelu_one_matches_erf_series():
    expected = 0.5 * (1.0 + _erf_series(1.0 / math.sqrt(2.0)))
    assert abs(float(nx.gelu(np.array(1.0))) - expected) < 1e-15


# ------------------------------------------------------------------- clip01

@pytest.mark.parametrize("x, y", [(0.5, 0.5), (1.5, 1.0), (-0.2, 0.0)])
def test_clip01_values(x, y):
    assert nx.clip01(np.array(x)) == y


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-5, 5)))
def test_clip01_bounded_and_idempotent(x):
    once = nx.clip01(x)
    assert np.all((once >= 0) & (once <= 1))
    np.testing.assert_array_equal(nx.clip01(once), once)


def test_clip01_adjoint_zero_at_and_beyond_bounds():
    x = np.array([-0.5, 0.0, 0.3, 1.0, 1.7])
    g = analytic_grad(nx.clip01, x, np.ones(5))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0, 0.0, 0.0])


# ----------------------------------------------------------------- backward

def test_backward_linear_outer_product():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 1))
    W = nx.param(w, "W")
    grads = nx.backward(nx.sum_all(nx.matmul(W, x)))
    expected = np.outer(np.ones(3), x[:, 0])
    np.testing.assert_allclose(grads[W], expected, rtol=0, atol=0)
    numeric = fd_grad(lambda a: float(np.sum(a @ x)), w.copy())
    assert rel_err(grads[W], numeric) < 1e-8


def test_backward_unused_parameter_gets_zero():
    a = nx.param(np.ones(3), "a")
    b = nx.param(np.ones(2), "b")
    grads = nx.backward(nx.sum_all(nx.square(a)))
    named = nx.grads_by_name(grads, [a, b])
    np.testing.assert_array_equal(named["b"], np.zeros(2))


def test_backward_through_clamped_coordinate_is_zero():
    w = nx.param(np.array([2.0, 0.5]), "w")
    loss = nx.sum_all(nx.square(nx.clip01(w)))
    assert nx.backward(loss)[w][0] == 0.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        nx.backward(nx.square(nx.param(np.ones(3))))


def test_backward_is_deterministic_and_reusable():
    rng = np.random.default_rng(5)
    w = nx.param(rng.normal(size=(3, 3)), "w")
    loss = nx.sum_all(nx.gelu(nx.matmul(w, w)))
    g1 = nx.backward(loss)[w]
    g2 = nx.backward(loss)[w]
    np.testing.assert_array_equal(g1, g2)


def test_non_finite_values_rejected():
    with pytest.raises(nx.NonFiniteError):
        nx.param(np.array([1.0, np.nan]))
    with pytest.raises(nx.NonFiniteError):
        nx.add(np.array([np.inf]), np.array([1.0]))


# ---------------------------------------------- gradient vs finite differences

UNARY = {
    "square": nx.square,
    "gelu": nx.gelu,
    "softmax": nx.softmax_rows,
    "log_softmax": nx.log_softmax_rows,
    "scale": lambda x: nx.scale(x, -1.7),
    "transpose": nx.swap_last,
    "reshape": lambda x: nx.reshape(x, (-1,)),
    "take": lambda x: nx.take(x, (slice(None), 0)),
    "layer_norm": lambda x: nx.layer_norm(x, np.linspace(0.5, 1.5, x.shape[-1]), np.linspace(-1, 1, x.shape[-1])),
    "mean": nx.mean_all,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15)
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    op = UNARY[name]
    w = rng.normal(size=np.shape(nx.value_of(op(x))))
    g = analytic_grad(op, x, w)
    numeric = fd_grad(lambda a: float(np.sum(nx.value_of(op(a)) * w)), x.copy())
    assert rel_err(g, numeric, floor=1e-5) < 1e-4


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31 - 1))
def test_clip01_gradient_away_from_bounds(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 2, size=(3, 4))
    x[np.abs(x) < 1e-3] += 0.01
    x[np.abs(x - 1) < 1e-3] += 0.01
    w = rng.normal(size=x.shape)
    g = analytic_grad(nx.clip01, x, w)
    numeric = fd_grad(lambda a: float(np.sum(np.clip(a, 0, 1) * w)), x.copy())
    assert rel_err(g, numeric, floor=1e-5) < 1e-4


BINARY = {
    "add": (nx.add, (3, 4), (4,)),
    "sub": (nx.sub, (3, 4), (3, 4)),
    "mul": (nx.mul, (3, 4), (1, 4)),
    "matmul": (nx.matmul, (2, 3, 4), (4, 5)),
    "mse": (nx.mse, (3, 4), (3, 4)),
    "layer_norm_affine": (lambda g, s: nx.layer_norm(np.arange(12.0).reshape(3, 4) ** 1.5, g, s), (4,), (4,)),
    "soft_ce": (lambda a, b: nx.soft_cross_entropy(a, nx.softmax_rows(b)), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=10)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_gradients_match_finite_differences(name, seed):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    w = rng.normal(size=np.shape(nx.value_of(op(a, b))))
    pa, pb = nx.param(a, "a"), nx.param(b, "b")
    grads = nx.backward(nx.sum_all(nx.mul(op(pa, pb), w)))
    num_a = fd_grad(lambda x: float(np.sum(nx.value_of(op(x, b)) * w)), a.copy())
    num_b = fd_grad(lambda x: float(np.sum(nx.value_of(op(a, x)) * w)), b.copy())
    assert rel_err(grads[pa], num_a, floor=1e-5) < 1e-4
    assert rel_err(grads[pb], num_b, floor=1e-5) < 1e-4


def test_gather_rows_scatters_adjoints():
    table = nx.param(np.arange(6.0).reshape(3, 2), "t")
    out = nx.gather_rows(table, np.array([[0, 2], [2, 2]]))
    g = nx.backward(nx.sum_all(out))[table]
    np.testing.assert_array_equal(g, [[1, 1], [0, 0], [3, 3]])


def test_concat_gradient_splits():
    a, b = nx.param(np.ones((2, 2)), "a"), nx.param(np.ones((2, 3)), "b")
    w = np.arange(10.0).reshape(2, 5)
    grads = nx.backward(nx.sum_all(nx.mul(nx.concat([a, b]), w)))
    np.testing.assert_array_equal(grads[a], w[:, :2])
    np.testing.assert_array_equal(grads[b], w[:, 2:])


def test_pin_forwards_value_and_passes_adjoint():
    x = nx.param(np.array([0.2, 0.4]), "x")
    y = nx.pin(nx.scale(x, 3.0), np.array([5.0, 6.0]))
    np.testing.assert_array_equal(y.value, [5.0, 6.0])
    np.testing.assert_array_equal(nx.backward(nx.sum_all(y))[x], [3.0, 3.0])
