import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie.errors import ContractError, NumericError, StateError
from moie.numcore import (DenseNet, Layer, Optimizer, backward, cross_entropy, forward,
                          grad_check, load_json, log_softmax, save_json, sigmoid, softmax)


def test_identity_layer():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(forward(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_sigmoid_zero_logit():
    net = DenseNet([Layer(np.zeros((1, 1)), np.zeros(1), "sigmoid")])
    assert forward(net, np.array([[5.0]]))[0, 0] == 0.5


def test_relu_layer():
    net = DenseNet([Layer(np.array([[1.0], [-1.0]]), np.zeros(2), "relu")])
    np.testing.assert_array_equal(forward(net, np.array([[3.0]])), [[3.0, 0.0]])


def test_linear_backward_by_hand():
    net = DenseNet([Layer(np.array([[0.7]]), np.zeros(1), "identity")])
    net.forward_train(np.array([[2.0]]))
    (gw, gb), _ = backward(net, np.ones((1, 1)))
    np.testing.assert_array_equal(gw, [[2.0]])
    np.testing.assert_array_equal(gb, [1.0])


def test_zero_upstream_gradient(rng):
    net = DenseNet.create([3, 4, 2], ["relu", "identity"], rng)
    net.forward_train(rng.standard_normal((5, 3)))
    grads, dx = net.backward(np.zeros((5, 2)))
    assert all(not g.any() for g in grads)
    assert not dx.any()


def test_sigmoid_local_gradient():
    net = DenseNet([Layer(np.ones((1, 1)), np.zeros(1), "sigmoid")])
    net.forward_train(np.zeros((1, 1)))
    _, dx = net.backward(np.ones((1, 1)))
    assert dx[0, 0] == pytest.approx(0.25)


def test_grad_check_quadratic():
    theta = np.array([3.0])
    err = grad_check(lambda: (0.5 * theta[0] ** 2, [theta.copy()]), [theta])
    assert err <= 1e-10


def test_grad_check_constant():
    theta = np.array([1.0, -2.0])
    assert grad_check(lambda: (4.0, [np.zeros(2)]), [theta]) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda: (0.0, [np.zeros(1)]), [np.zeros(1)], h=0.0)


def test_densenet_gradients(rng):
    net = DenseNet.create([4, 6, 3], ["relu", "sigmoid"], rng)
    x = rng.standard_normal((5, 4))
    target = rng.random((5, 3))

    def loss():
        out = net.forward_train(x)
        grads, _ = net.backward(out - target)
        return 0.5 * float(((out - target) ** 2).sum()), grads

    assert grad_check(loss, net.params()) < 1e-4


def test_forward_is_referentially_transparent(rng):
    net = DenseNet.create([4, 5, 2], ["relu", "identity"], rng)
    x = rng.standard_normal((7, 4))
    assert forward(net, x).tobytes() == forward(net, x).tobytes()


def test_shape_mismatch():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    with pytest.raises(ContractError):
        forward(net, np.ones((1, 3)))


def test_optimizer_deterministic(rng):
    def train():
        r = np.random.default_rng(7)
        net = DenseNet.create([3, 4, 2], ["relu", "identity"], r)
        opt = Optimizer(net.params(), lr=0.05)
        x, y = r.standard_normal((20, 3)), r.integers(0, 2, 20)
        for _ in range(30):
            p = softmax(net.forward_train(x), axis=1)
            p[np.arange(20), y] -= 1
            grads, _ = net.backward(p / 20)
            opt.step(grads)
        return [q.copy() for q in net.params()]

    a, b = train(), train()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_optimizer_non_finite():
    p = np.array([1.0])
    opt = Optimizer([p], lr=1.0, kind="sgd")
    with pytest.raises(NumericError):
        opt.step([np.array([np.inf])])


def test_json_round_trip(tmp_path, rng):
    net = DenseNet.create([3, 4, 2], ["relu", "sigmoid"], rng)
    save_json(net.to_dict(), tmp_path / "net.json")
    back = DenseNet.from_dict(load_json(tmp_path / "net.json"))
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(forward(net, x), forward(back, x))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_log_softmax_consistent(z):
    z = np.array(z)
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)
    assert softmax(z).sum() == pytest.approx(1.0)


@given(st.floats(-700, 700))
@settings(max_examples=50)
def test_sigmoid_stable(v):
    s = sigmoid(np.array([v]))[0]
    assert 0.0 <= s <= 1.0 and np.isfinite(s)


def test_cross_entropy_uniform():
    ce = cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    np.testing.assert_allclose(ce, np.log(4))


def test_backward_needs_forward_train():
    net = DenseNet.create([2, 3, 1], ["relu", "identity"], np.random.default_rng(0))
    net.forward(np.ones((1, 2)))
    with pytest.raises(StateError):
        net.backward(np.ones((1, 1)))
