import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morphcl.exceptions import ArchitectureError, ShapeMismatchError
from morphcl.schemas import ActivationKind, Architecture, LossKind
from morphcl.services.netcore import (
    Network,
    ParamSet,
    backward,
    forward,
    grad_check,
    init_network,
    load_network,
    loss,
    save_network,
    score,
    value_and_grad,
)

SMOOTH = [ActivationKind.TANH, ActivationKind.SIGMOID, ActivationKind.SOFTSIGN, ActivationKind.ISRU, ActivationKind.IDENTITY]


def test_init_is_deterministic_and_glorot_bounded():
    arch = Architecture.parse([3, 16, 2])
    a = init_network(arch, ActivationKind.RELU, 7)
    b = init_network(arch, ActivationKind.RELU, 7)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    limit = np.sqrt(6.0 / (3 + 16))
    assert np.all(np.abs(a.weights[0]) <= limit)
    assert all(np.all(bias == 0.0) for bias in a.biases)


def test_output_layer_is_linear(small_net):
    assert small_net.layers[-1].activation is ActivationKind.IDENTITY
    assert all(layer.activation is ActivationKind.TANH for layer in small_net.layers[:-1])


def test_parameters_are_read_only(small_net):
    with pytest.raises(ValueError):
        small_net.layers[0].weight[0, 0] = 1.0


def test_forward_shape_and_input_check(small_net):
    assert forward(small_net, np.zeros((5, 1))).shape == (5, 1)
    with pytest.raises(ShapeMismatchError, match="layer 0"):
        forward(small_net, np.zeros((5, 2)))


def test_invalid_architecture():
    with pytest.raises(ArchitectureError):
        Architecture.parse([1, 0, 1])
    with pytest.raises(ArchitectureError):
        Architecture.parse([4])


@pytest.mark.parametrize("activation", SMOOTH)
@pytest.mark.parametrize("kind", [LossKind.MSE, LossKind.CROSS_ENTROPY])
def test_backward_matches_finite_differences(activation, kind):
    rng = np.random.default_rng(3)
    net = init_network(Architecture.parse([2, 4, 3, 3]), activation, 11)
    net = net.with_params(net.params().map(lambda p: p + rng.normal(0.0, 0.2, size=p.shape)))
    x = rng.normal(size=(6, 2))
    if kind is LossKind.MSE:
        y = rng.normal(size=(6, 3))
    else:
        y = rng.integers(0, 3, size=(6, 1)).astype(np.float64)
    assert grad_check(net, (x, y), kind, h=1e-5) < 1e-5


def test_grad_check_rejects_large_step(small_net):
    with pytest.raises(ValueError):
        grad_check(small_net, (np.zeros((2, 1)), np.zeros((2, 1))), LossKind.MSE, h=0.1)


def test_grad_check_flags_a_wrong_backward(monkeypatch):
    from morphcl.services import netcore

    rng = np.random.default_rng(8)
    net = init_network(Architecture.parse([2, 4, 1]), ActivationKind.TANH, 8)
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 1))
    honest = grad_check(net, (x, y), LossKind.MSE, h=1e-5)
    true_backward = netcore.backward
    monkeypatch.setattr(netcore, "backward", lambda *args: ParamSet(tuple(1.5 * g for g in true_backward(*args))))
    # |1.5g - g| / (1.5|g| + |g|) = 0.2 for every nonzero entry
    assert grad_check(net, (x, y), LossKind.MSE, h=1e-5) == pytest.approx(0.2, abs=1e-4)
    assert honest < 1e-5


def test_cross_entropy_labels_match_one_hot():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(8, 4))
    labels = rng.integers(0, 4, size=8)
    one_hot = np.eye(4)[labels]
    assert loss(logits, labels.reshape(-1, 1).astype(float), LossKind.CROSS_ENTROPY) == pytest.approx(
        loss(logits, one_hot, LossKind.CROSS_ENTROPY)
    )


def test_mse_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        loss(np.zeros((3, 1)), np.zeros((3, 2)), LossKind.MSE)


def test_value_and_grad_agrees_with_backward(small_net):
    x = np.linspace(-1, 1, 10).reshape(-1, 1)
    value, grads = value_and_grad(small_net, x, np.sin(x), LossKind.MSE)
    assert value == pytest.approx(loss(forward(small_net, x), np.sin(x), LossKind.MSE))
    for a, b in zip(grads, backward(small_net, x, np.sin(x), LossKind.MSE)):
        assert np.array_equal(a, b)


def test_score_is_accuracy_for_classification():
    net = init_network(Architecture.parse([2, 3]), ActivationKind.RELU, 0)
    x = np.random.default_rng(0).normal(size=(20, 2))
    predicted = np.argmax(forward(net, x), axis=1).reshape(-1, 1).astype(float)
    assert score(net, x, predicted, LossKind.CROSS_ENTROPY) == 1.0


def test_checkpoint_restores_outputs(small_net, tmp_path):
    path = save_network(small_net, tmp_path / "net.json")
    restored = load_network(path)
    x = np.linspace(-1, 1, 7).reshape(-1, 1)
    assert restored.arch == small_net.arch
    assert np.allclose(forward(restored, x), forward(small_net, x), rtol=0, atol=1e-15)


@given(st.floats(min_value=-3, max_value=3), st.integers(min_value=1, max_value=4))
def test_paramset_arithmetic(c, n):
    rng = np.random.default_rng(n)
    p = ParamSet(tuple(rng.normal(size=(n, n + 1)) for _ in range(2)))
    assert np.allclose((p + p.scale(c)).flat(), (1 + c) * p.flat())
    assert np.allclose((p - p).flat(), 0.0)
    with pytest.raises(ShapeMismatchError):
        p + ParamSet((np.zeros(1),))


def test_mse_ignores_row_order():
    rng = np.random.default_rng(1)
    pred, target = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    perm = rng.permutation(12)
    assert loss(pred[perm], target[perm], LossKind.MSE) == pytest.approx(loss(pred, target, LossKind.MSE), abs=1e-15)


def test_cross_entropy_is_logsumexp_minus_true_logit():
    from scipy.special import logsumexp

    rng = np.random.default_rng(2)
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    expected = np.mean(logsumexp(logits, axis=1) - logits[np.arange(6), labels])
    got = loss(logits, labels.reshape(-1, 1).astype(float), LossKind.CROSS_ENTROPY)
    assert got == pytest.approx(expected, abs=1e-12)


def test_losses_match_plain_loops():
    rng = np.random.default_rng(3)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    total = 0.0
    for i in range(4):
        for j in range(3):
            total += (pred[i][j] - target[i][j]) ** 2
    assert loss(pred, target, LossKind.MSE) == pytest.approx(total / 12, abs=1e-12)

    one_hot = np.eye(3)[[0, 2, 1, 2]]
    ce = 0.0
    for i in range(4):
        norm = np.log(sum(np.exp(pred[i][k]) for k in range(3)))
        ce -= sum(one_hot[i][k] * (pred[i][k] - norm) for k in range(3))
    assert loss(pred, one_hot, LossKind.CROSS_ENTROPY) == pytest.approx(ce / 4, abs=1e-12)


def test_identity_stack_passes_inputs_through():
    arch = Architecture.parse([3, 3, 3, 3])
    net = Network.from_arrays(arch, ActivationKind.IDENTITY, [np.eye(3)] * 3, [np.zeros(3)] * 3)
    x = np.random.default_rng(4).normal(size=(7, 3))
    assert np.array_equal(forward(net, x), x)


def test_zero_weights_output_the_last_bias():
    arch = Architecture.parse([2, 4, 2])
    net = Network.from_arrays(arch, ActivationKind.TANH, [np.zeros((4, 2)), np.zeros((2, 4))], [np.ones(4), [0.5, -2.0]])
    out = forward(net, np.random.default_rng(5).normal(size=(3, 2)))
    assert np.array_equal(out, np.tile([0.5, -2.0], (3, 1)))


def test_relu_forward_by_hand():
    arch = Architecture.parse([1, 2, 1])
    net = Network.from_arrays(
        arch, ActivationKind.RELU, [np.array([[1.0], [-1.0]]), np.array([[2.0, 3.0]])], [np.zeros(2), np.array([0.5])]
    )
    x = np.array([[2.0], [-1.0], [0.0]])
    # hidden: relu(x), relu(-x)
    assert forward(net, x).ravel().tolist() == [4.5, 3.5, 0.5]
