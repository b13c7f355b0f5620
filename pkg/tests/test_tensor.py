import threading

import numpy as np
import pytest

from dbsn import tensor as T
from dbsn.tensor import Tensor

FD_TOL = 1e-6


def _rand(rng, shape):
    return rng.uniform(-2, 2, size=shape)


def test_matmul_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.values, [[3.0], [7.0]])


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).values, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_logsumexp_pair():
    assert T.logsumexp(Tensor([5.0, 5.0])).item() == pytest.approx(5 + np.log(2), abs=1e-14)
    assert T.logsumexp(Tensor([5.0, 5.0])).item() == pytest.approx(5.6931, abs=1e-4)


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    x = Tensor([2.0, -1.0], requires_grad=True)
    T.backward(T.tensor_sum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, -2.0])

    x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
    T.backward(T.logsumexp(x))
    np.testing.assert_allclose(x.grad, T.softmax(x.detach()).values, rtol=0, atol=1e-15)


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        T.backward(T.tensor_sum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0)


def test_shared_subexpression_counted_once_per_use():
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = T.exp(x)
    T.backward(T.tensor_sum(y * y + y))
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.values) + np.exp(x.values), rtol=1e-14)


def test_tape_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = T.relu(x)
    b = T.exp(a)
    root = T.tensor_sum(a * b)
    tape = T.backward(root)
    pos = {id(t): i for i, t in enumerate(tape.ops)}
    for node in tape.ops:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len(set(map(id, tape.ops))) == len(tape.ops)


def test_no_broadcasting_except_scalar():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) * 2.0
    assert out.shape == (2, 3)
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_is_error():
    with pytest.raises(T.NonFiniteError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(T.NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_no_recording_without_grad():
    a = Tensor([1.0, 2.0])
    out = T.exp(a)
    assert not out.requires_grad and out.is_leaf
    b = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        assert not T.exp(b).requires_grad
    assert T.exp(b).requires_grad


def test_no_grad_is_thread_local():
    seen = []

    def worker():
        seen.append(T.grad_enabled())

    with T.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [True]


def test_float32_selectable():
    x = Tensor([1.0, 2.0], dtype=np.float32)
    assert (x * 2.0).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_log_softmax_identity(rng):
    for _ in range(50):
        x = Tensor(rng.normal(scale=5, size=(4, 7)))
        lhs = T.log_softmax(x, axis=1).values
        rhs = x.values - T.logsumexp(x, axis=1).values[:, None]
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


# Every primitive against central differences on inputs in [-2, 2].
W = np.random.default_rng(7).normal(size=(3, 4))
MASK = (np.random.default_rng(8).random((3, 4)) < 0.7).astype(float)
PRIMITIVES = {
    "add": lambda x: T.tensor_sum((x + Tensor(W)) * Tensor(W)),
    "sub": lambda x: T.tensor_sum((Tensor(W) - x) * Tensor(W)),
    "mul": lambda x: T.tensor_sum(x * x * Tensor(W)),
    "div": lambda x: T.tensor_sum(Tensor(W) / (x * x + 1.0)),
    "scalar": lambda x: T.tensor_sum(3.0 - x * 0.5 + 2.0 / (x * x + 4.0)),
    "neg": lambda x: T.tensor_sum(-x * Tensor(W)),
    "relu": lambda x: T.tensor_sum(T.relu(x + 0.05) * Tensor(W)),
    "exp": lambda x: T.tensor_sum(T.exp(x) * Tensor(W)),
    "log": lambda x: T.tensor_sum(T.log(x * x + 0.5) * Tensor(W)),
    "softplus": lambda x: T.tensor_sum(T.softplus(x) * Tensor(W)),
    "logsumexp_all": lambda x: T.logsumexp(x),
    "logsumexp_axis": lambda x: T.tensor_sum(T.logsumexp(x, axis=1) * Tensor(W[:, 0])),
    "log_softmax": lambda x: T.tensor_sum(T.log_softmax(x, axis=1) * Tensor(W)),
    "softmax": lambda x: T.tensor_sum(T.softmax(x, axis=0) * Tensor(W)),
    "sum_axis": lambda x: T.tensor_sum(T.tensor_sum(x, axis=0) * Tensor(W[0])),
    "mean": lambda x: T.mean(x * x),
    "mean_axis": lambda x: T.tensor_sum(T.mean(x * x, axis=1) * Tensor(W[:, 1])),
    "standardize": lambda x: T.tensor_sum(T.standardize(x) * Tensor(W)),
    "matmul": lambda x: T.tensor_sum(T.matmul(x, Tensor(W.T)) * Tensor(np.arange(9.0).reshape(3, 3))),
    "concat": lambda x: T.tensor_sum(T.concat([x, x * x], axis=1) * Tensor(np.c_[W, W])),
    "dropout": lambda x: T.tensor_sum(T.dropout(x, MASK, 0.7) * Tensor(W)),
    "gather": lambda x: T.tensor_sum(T.log(T.gather(T.softmax(x, axis=1), np.array([0, 3, 1])))),
    "select": lambda x: T.tensor_sum(T.select(x, 1) * Tensor(W[1])),
    "repeat_rows": lambda x: T.tensor_sum(T.repeat_rows(T.select(x, 0), 3) * Tensor(W)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    x = Tensor(_rand(rng, (3, 4)))
    assert T.finite_difference_check(PRIMITIVES[name], x, h=1e-5) < FD_TOL


def test_fd_check_examples(rng):
    x = Tensor([1.0, 2.0, 3.0])
    assert T.finite_difference_check(lambda v: T.tensor_sum(v * v), x, h=1e-5) < 1e-6
    x = Tensor(rng.normal(size=6))
    assert T.finite_difference_check(T.logsumexp, x, h=1e-5) < 1e-6


def _bad_square(a):
    # forward a^2, deliberately wrong backward (a instead of 2a)
    return T._result(a.values ** 2, (a,), lambda g: (g * a.values,), "bad_square")


def test_fd_check_negative_control():
    x = Tensor([1.0, 2.0, 3.0])
    assert T.finite_difference_check(lambda v: T.tensor_sum(_bad_square(v)), x) > 1e-2


def test_fd_check_rejects_nondeterministic():
    gen = np.random.default_rng(0)
    x = Tensor([1.0, 2.0])
    with pytest.raises(T.NonDeterministicError):
        T.finite_difference_check(lambda v: T.tensor_sum(v * float(gen.random())), x)


def test_fd_check_restores_input():
    x = Tensor([0.3, -0.7])
    before = x.values.copy()
    T.finite_difference_check(lambda v: T.tensor_sum(T.exp(v)), x)
    np.testing.assert_array_equal(x.values, before)


def test_bitwise_determinism(rng):
    data = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 2))

    def run():
        x = Tensor(data, requires_grad=True)
        out = T.tensor_sum(T.log_softmax(T.matmul(T.relu(x), Tensor(w)), axis=1))
        T.backward(out)
        return out.values.copy(), x.grad.copy()

    (a1, g1), (a2, g2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and g1.tobytes() == g2.tobytes()
