import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from medkgqa import tensor as T
from medkgqa.optim import MissingGradientError, OptimConfig, Optimizer, optimize_step
from medkgqa.tensor import Parameter, Tape, Tensor, numerical_gradient, relative_error
from oracles import OPS, op_gradient_errors

# frozen from mpmath at 40 digits
SIGMOID_3 = 0.9525741268224332191211518482282477986138
SOFTMAX_123 = [0.09003057317038045799802210148449179786792905,
               0.2447284710547976524729596183407627971992976,
               0.6652409557748218895290182801747454049327633]


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def grad_of(fn, params):
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [tape.gradient(p) for p in params]


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_selector_row():
    assert T.matmul(Tensor([[1, 0]]), Tensor([[5], [7]])).data.tolist() == [[5.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in [(2, 3), (3, 4), (4, 2)])
    np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_large_inputs_no_overflow():
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_matches_extended_precision():
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, SOFTMAX_123, atol=1e-12, rtol=0)


def test_softmax_empty_axis_errors():
    with pytest.raises(T.ShapeError):
        T.softmax(Tensor(np.zeros((2, 0))), axis=1)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    y = T.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(y > 0) and np.all(y <= 1)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, y, atol=1e-12)


# -- elementwise ---------------------------------------------------------------

def test_elementwise_basics():
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert T.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert abs(T.sigmoid(Tensor(3.0)).item() - SIGMOID_3) < 1e-9


def test_elementwise_shape_rules():
    a = Tensor(np.ones((2, 3)))
    assert T.elementwise("add", a, Tensor(2.0)).shape == (2, 3)
    assert T.mul(Tensor([[2.0]]), a).shape == (2, 3)
    with pytest.raises(T.ShapeError):
        T.elementwise("mul", a, Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.elementwise("pow", a, a)


def test_sigmoid_saturates_without_overflow():
    y = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


# -- concat --------------------------------------------------------------------

def test_concat_shapes():
    assert T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3)))], axis=1).shape == (1, 5)
    x = Tensor([[1.0, 2.0]])
    assert T.concat([x]) is x
    with pytest.raises(T.ShapeError):
        T.concat([Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2)))], axis=1)


def test_concat_gradient_routes_to_parts():
    rng = np.random.default_rng(3)
    a, b = Parameter(rng.normal(size=(2, 2))), Parameter(rng.normal(size=(2, 3)))
    w = Tensor(rng.normal(size=(5, 1)))

    def loss():
        return T.sum(T.tanh(T.concat([a, b], axis=1) @ w))

    ga, gb = grad_of(loss, [a, b])
    assert relative_error(ga, numerical_gradient(loss, a)) < 1e-4
    assert relative_error(gb, numerical_gradient(loss, b)) < 1e-4


# -- backward ------------------------------------------------------------------

def test_backward_linear_sum():
    x = Tensor([[1.0], [2.0], [3.0]])
    W = Parameter(np.ones((2, 3)))
    (gW,) = grad_of(lambda: T.sum(W @ x), [W])
    np.testing.assert_array_equal(gW, np.repeat(x.data.T, 2, axis=0))


def test_backward_unreached_parameter_is_exactly_zero():
    p = Parameter(np.ones((2, 2)))
    q = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        T.tanh(p)
        loss = T.sum(q * q)
    tape.backward(loss)
    assert np.all(tape.gradient(p) == 0.0)
    np.testing.assert_array_equal(tape.gradient(q), 2 * np.ones((2, 2)))


def test_backward_twice_is_an_error():
    p = Parameter([1.0])
    with Tape() as tape:
        loss = T.sum(p * p)
    tape.backward(loss)
    with pytest.raises(T.TapeError):
        tape.backward(loss)


def test_backward_non_scalar_loss_is_an_error():
    p = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        out = p * 2.0
    with pytest.raises(T.TapeError):
        tape.backward(out)


def test_tape_replays_in_reverse_order():
    order = []
    p = Parameter([[1.0]])
    with Tape() as tape:
        a = T.tanh(p)
        b = T.sigmoid(a)
        c = T.sum(b)
    for rec in tape.records:
        fn = rec.backward

        def spy(g, fn=fn, out=rec.out):
            order.append(id(out))
            return fn(g)

        rec.backward = spy
    tape.backward(c)
    assert order == [id(c), id(b), id(a)]


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 3)))
    W1, W2, W3 = (Parameter(rng.normal(size=s) * 0.7) for s in [(3, 5), (5, 4), (4, 1)])

    def loss():
        h = T.tanh(x @ W1)
        h = T.sigmoid(h @ W2)
        return T.sum(h @ W3)

    grads = grad_of(loss, [W1, W2, W3])
    for g, p in zip(grads, [W1, W2, W3]):
        assert relative_error(g, numerical_gradient(loss, p, eps=1e-5)) < 1e-4


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_check(name):
    assert max(op_gradient_errors(name, zlib.crc32(name.encode()))) < 1e-4


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(5)
        W = Parameter(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(2, 4)))
        with Tape() as tape:
            loss = T.sum(T.tanh(x @ W) * T.softmax(x @ W, axis=1))
        tape.backward(loss)
        return loss.data.tobytes(), tape.gradient(W).tobytes()

    assert run() == run()


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_ops_outside_tape_are_untracked():
    p = Parameter([[1.0]])
    out = T.tanh(p)
    assert not out.requires_grad


# -- optimizer -----------------------------------------------------------------

def test_optimizer_lr_zero_is_noop():
    for rule in ("sgd", "adam"):
        p = Parameter([1.0, -2.0])
        before = p.data.copy()
        optimize_step([p], {p: np.array([0.3, 0.4])}, OptimConfig(rule=rule, lr=0.0))
        np.testing.assert_array_equal(p.data, before)


def test_sgd_lr_one_subtracts_gradient():
    p = Parameter([1.0, -2.0])
    optimize_step([p], {p: np.array([0.5, 0.25])}, OptimConfig(rule="sgd", lr=1.0))
    np.testing.assert_array_equal(p.data, [0.5, -2.25])


def test_missing_gradient_errors():
    p, q = Parameter([1.0]), Parameter([2.0])
    with pytest.raises(MissingGradientError):
        optimize_step([p, q], {p: np.array([1.0])}, OptimConfig(rule="sgd"))


def test_adam_solves_convex_quadratic():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 4))
    A = Tensor(M @ M.T + np.eye(4))
    b = Tensor(rng.normal(size=(4, 1)))
    x = Parameter(np.zeros((4, 1)))
    xstar = np.linalg.solve(A.data, b.data)
    fstar = (-0.5 * b.data.T @ xstar).item()
    opt = Optimizer([x], OptimConfig(rule="adam", lr=0.05))

    def f():
        return T.sum(0.5 * (x.T @ (A @ x)) - b.T @ x)

    for _ in range(2000):
        with Tape() as tape:
            loss = f()
        opt.step(tape.backward(loss))
    assert f().item() - fstar < 1e-6
