import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qedg import tensor as T
from qedg.tensor import MissingGradient, NonFiniteError, Optimizer, ParamSet, Tensor

from conftest import numeric_grad, rel_error

N_INSTANCES = 20


def _check_grad(fn, *shapes, positive=False, seed=0, away_from_zero=False):
    """Autodiff vs central differences for fn(*tensors) -> scalar, float64."""
    rng = np.random.default_rng(seed)
    xs = []
    for s in shapes:
        x = rng.normal(size=s)
        if positive:
            x = np.abs(x) + 0.5
        if away_from_zero:
            x = np.where(np.abs(x) < 0.1, 0.5, x)
        xs.append(x)
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = fn(*ts)
    out.backward()
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [Tensor(v if j == i else xs[j]) for j in range(len(xs))]
            return fn(*args).item()
        num = numeric_grad(f, x.copy())
        assert rel_error(ts[i].grad, num) <= 1e-4, (fn, i)


def _weighted(t, seed=99):
    """Random linear functional so every output element matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return T.tsum(t * Tensor(w))


UNARY = {
    "neg": lambda a: T.neg(a),
    "relu": lambda a: T.relu(a),
    "tanh": lambda a: T.tanh(a),
    "sigmoid": lambda a: T.sigmoid(a),
    "exp": lambda a: T.exp(a),
    "sin": lambda a: T.sin(a),
    "cos": lambda a: T.cos(a),
    "sum_axis": lambda a: T.tsum(a, axis=0),
    "mean_axis": lambda a: T.mean(a, axis=1, keepdims=True),
    "variance": lambda a: T.variance(a, axis=1),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "transpose": lambda a: T.transpose(a),
    "index": lambda a: a[np.array([0, 2, 0]), np.array([1, 0, 1])],
    "softmax": lambda a: T.softmax(a, axis=1),
    "log_softmax": lambda a: T.log_softmax(a, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op = UNARY[name]
    for seed in range(N_INSTANCES):
        _check_grad(lambda a: _weighted(op(a), seed), (3, 4), seed=seed, away_from_zero=name == "relu")


@pytest.mark.parametrize("name", ["log", "sqrt", "power"])
def test_positive_domain_gradients(name):
    op = {"log": T.log, "sqrt": T.sqrt, "power": lambda a: T.power(a, 2.5)}[name]
    for seed in range(N_INSTANCES):
        _check_grad(lambda a: _weighted(op(a), seed), (3, 4), seed=seed, positive=True)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(name):
    op = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[name]
    for seed in range(N_INSTANCES):
        if name == "div":
            _check_grad(lambda a, b: _weighted(op(a, b), seed), (3, 4), (1, 4), seed=seed, positive=True)
        else:
            _check_grad(lambda a, b: _weighted(op(a, b), seed), (3, 4), (4,), seed=seed)


def test_matmul_and_concat_gradients():
    for seed in range(N_INSTANCES):
        _check_grad(lambda a, b: _weighted(a @ b, seed), (3, 4), (4, 2), seed=seed)
        _check_grad(lambda a, b: _weighted(T.concat([a, b], axis=1), seed), (3, 2), (3, 3), seed=seed)


def test_cosine_similarity_gradient():
    for seed in range(N_INSTANCES):
        _check_grad(lambda a, b: T.cosine_similarity(a, b), (5,), (5,), seed=seed)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1
    T.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()


def test_nonfinite_forward_names_node():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError) as err:
        T.log(x)
    assert err.value.node == "log"


def test_cosine_zero_norm_is_error():
    with pytest.raises(ValueError, match="zero-norm"):
        T.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))


def test_dtype_default_float32_and_float64_kept():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64
    assert (Tensor(np.array([1.0])) * 3.0).dtype == np.float64


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)))
def test_softmax_rows_on_simplex(x):
    p = T.softmax(Tensor(x), axis=1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x), axis=1).data), p, atol=1e-12)


# -- optimizers -----------------------------------------------------------------------


def _quadratic_params():
    ps = ParamSet([("w", np.array([1.0, -2.0]))])
    return ps


def _set_grad(ps, g):
    ps["w"].grad = np.asarray(g, dtype=np.float32)


def test_sgd_momentum_matches_hand_recurrence():
    ps = _quadratic_params()
    opt = Optimizer(ps, T.sgd(0.1, 0.9))
    w = np.array([1.0, -2.0])
    buf = np.zeros(2)
    for g in ([1.0, 1.0], [0.5, -1.0], [0.0, 2.0]):
        _set_grad(ps, g)
        opt.step()
        buf = 0.9 * buf + np.array(g)
        w = w - 0.1 * buf
    np.testing.assert_allclose(ps["w"].data, w, rtol=1e-6)


def test_adam_first_step_moves_by_learning_rate():
    # bias-corrected Adam: first update is lr * g / (|g| + eps) = lr * sign(g)
    ps = _quadratic_params()
    opt = Optimizer(ps, T.adam(0.01))
    _set_grad(ps, [3.0, -0.2])
    opt.step()
    np.testing.assert_allclose(ps["w"].data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-5)
    assert ps["w"].grad is None


def test_step_without_gradient_raises():
    ps = _quadratic_params()
    with pytest.raises(MissingGradient, match="'w'"):
        Optimizer(ps, T.sgd()).step()


def test_paramset_duplicate_and_copy():
    ps = ParamSet([("a", np.zeros(2))], rng_seed=4)
    with pytest.raises(KeyError):
        ps.add("a", np.ones(2))
    cp = ps.copy()
    cp["a"].data[:] = 5
    assert ps["a"].data.sum() == 0 and cp.rng_seed == 4
    assert ps.count() == 2
