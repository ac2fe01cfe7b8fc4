import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgdro import numerics
from pgdro.numerics import DimensionError, Network

from conftest import random_net, relative_error


def hand_net():
    # 2-2-2: hidden = relu(x @ W1 + b1), logits = hidden @ W2 + b2
    W1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.5, -1.0])
    W2 = np.array([[1.0, 0.0], [3.0, -2.0]])
    b2 = np.array([0.25, -0.5])
    return Network((W1, W2), (b1, b2))


# forward ---------------------------------------------------------------

def test_forward_zero_network_gives_zero_logits(rng):
    net = numerics.zero_network([3, 5, 4, 2])
    assert np.array_equal(numerics.forward(net, rng.normal(size=(7, 3))), np.zeros((7, 2)))


def test_forward_identity_single_layer(rng):
    net = Network((np.eye(3),), (np.zeros(3),))
    X = rng.normal(size=(5, 3))
    assert np.array_equal(numerics.forward(net, X), X)


def test_forward_hand_evaluated():
    # x @ W1 + b1 = (5, 0) + (0.5, -1) = (5.5, -1) -> relu (5.5, 0)
    # (5.5, 0) @ W2 + b2 = (5.5, 0) + (0.25, -0.5)
    logits = numerics.forward(hand_net(), np.array([[1.0, 2.0]]))
    assert np.array_equal(logits, np.array([[5.75, -0.5]]))


def test_forward_dimension_mismatch_names_dims():
    with pytest.raises(DimensionError) as exc:
        numerics.forward(hand_net(), np.ones((4, 3)))
    assert exc.value.expected == 2 and exc.value.actual == 3


def test_forward_batch_homogeneous(rng):
    net = random_net([3, 8, 8, 2], 0)
    A, B = rng.normal(size=(11, 3)), rng.normal(size=(6, 3))
    joint = numerics.forward(net, np.vstack([A, B]))
    split = np.vstack([numerics.forward(net, A), numerics.forward(net, B)])
    np.testing.assert_allclose(joint, split, rtol=0, atol=1e-14)


def test_network_shape_validation():
    with pytest.raises(DimensionError):
        Network((np.zeros((2, 3)), np.zeros((4, 2))), (np.zeros(3), np.zeros(2)))
    with pytest.raises(DimensionError):
        Network((np.zeros((2, 3)),), (np.zeros(2),))


def test_network_parameters_are_read_only():
    net = hand_net()
    with pytest.raises(ValueError):
        net.weights[0][0, 0] = 9.0


# cross-entropy ---------------------------------------------------------

@pytest.mark.parametrize("k", [2, 3, 10])
def test_cross_entropy_uniform_logits(k):
    losses = numerics.softmax_cross_entropy(np.full((4, k), 1.7), [0, 1, 0, 1])
    np.testing.assert_allclose(losses, math.log(k), rtol=1e-15)


def test_cross_entropy_large_logit_is_stable():
    losses = numerics.softmax_cross_entropy(np.array([[1e6, 0.0]]), [0])
    assert np.isfinite(losses).all() and losses[0] == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_closed_form():
    expected = math.log(math.e + math.e**2 + math.e**3) - 3.0
    loss = numerics.softmax_cross_entropy(np.array([[1.0, 2.0, 3.0]]), [2])[0]
    assert loss == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_bad_label_reports_row():
    with pytest.raises(ValueError, match="row 1"):
        numerics.softmax_cross_entropy(np.zeros((3, 2)), [0, 2, 1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 4)) * 3
    y = rng.integers(0, 4, size=6)
    a = numerics.softmax_cross_entropy(logits, y)
    b = numerics.softmax_cross_entropy(logits + shift, y)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_cross_entropy_nonnegative(rng):
    losses = numerics.softmax_cross_entropy(rng.normal(size=(50, 3)) * 10, rng.integers(0, 3, 50))
    assert (losses >= 0).all()


# backward --------------------------------------------------------------

def test_backward_zero_weights_give_zero_gradients(rng):
    net = random_net([3, 4, 2], 1)
    g = numerics.backward(net, rng.normal(size=(5, 3)), rng.integers(0, 2, 5), np.zeros(5))
    assert all(np.array_equal(p, np.zeros_like(p)) for p in g.parameters())


def test_backward_uniform_weights_match_mean_loss_gradient(rng):
    net = random_net([2, 3, 2], 2)
    X, y = rng.normal(size=(8, 2)), rng.integers(0, 2, 8)
    analytic = numerics.backward(net, X, y, np.full(8, 1 / 8))

    def mean_loss(n):
        return float(np.mean(numerics.softmax_cross_entropy(numerics.forward(n, X), y)))

    fd = numerics.finite_difference_gradient(net, mean_loss, 1e-5)
    np.testing.assert_allclose(analytic.flat(), fd.flat(), rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    # <= 20 parameters: 2-3-2 net has 6 + 3 + 6 + 2 = 17
    net = random_net([2, 3, 2], seed)
    assert net.num_parameters <= 20
    X = rng.normal(size=(6, 2))
    y = rng.integers(0, 2, 6)
    w = rng.uniform(0, 1, 6)
    analytic = numerics.backward(net, X, y, w).flat()
    fd = numerics.finite_difference_gradient(
        net, lambda n: numerics.weighted_loss(n, X, y, w), 1e-5).flat()
    assert relative_error(analytic, fd).max() < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences_deeper(seed):
    # four-layer nets with <= 100 parameters
    rng = np.random.default_rng(100 + seed)
    net = random_net([2, 5, 5, 4, 3], 100 + seed)
    assert net.num_parameters <= 100
    X = rng.normal(size=(10, 2))
    y = rng.integers(0, 3, 10)
    w = rng.uniform(0, 1, 10)
    analytic = numerics.backward(net, X, y, w).flat()
    fd = numerics.finite_difference_gradient(
        net, lambda n: numerics.weighted_loss(n, X, y, w), 1e-5).flat()
    assert relative_error(analytic, fd).max() < 1e-4


def test_backward_rejects_negative_weights():
    with pytest.raises(ValueError):
        numerics.backward(hand_net(), np.ones((2, 2)), [0, 1], [1.0, -0.5])


def test_backward_weight_length_mismatch():
    with pytest.raises(DimensionError):
        numerics.backward(hand_net(), np.ones((2, 2)), [0, 1], [1.0])


# finite differences ----------------------------------------------------

def scalar_net(theta):
    return Network((np.array([[theta]]),), (np.zeros(1),))


def test_finite_difference_quadratic():
    g = numerics.finite_difference_gradient(
        scalar_net(3.0), lambda n: 0.5 * n.weights[0][0, 0] ** 2, 1e-5)
    assert g.weights[0][0, 0] == pytest.approx(3.0, rel=1e-9)
    assert g.biases[0][0] == 0.0


@pytest.mark.parametrize("theta", [-4.0, 0.0, 2.5])
def test_finite_difference_linear(theta):
    g = numerics.finite_difference_gradient(
        scalar_net(theta), lambda n: 1.75 * n.weights[0][0, 0], 1e-5)
    assert g.weights[0][0, 0] == pytest.approx(1.75, rel=1e-9)


def test_finite_difference_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        numerics.finite_difference_gradient(scalar_net(1.0), lambda n: 0.0, 0.0)


# sgd -------------------------------------------------------------------

def grads_like(net, value):
    return numerics.Gradients(tuple(np.full_like(w, value) for w in net.weights),
                              tuple(np.full_like(b, value) for b in net.biases))


def test_sgd_zero_gradient_no_decay_is_identity():
    net = random_net([2, 3, 2], 0)
    new = numerics.sgd_step(net, grads_like(net, 0.0), lr=0.5, l2=0.0)
    assert numerics.max_abs_diff(net, new) == 0.0


def test_sgd_zero_lr_is_identity():
    net = random_net([2, 3, 2], 0)
    new = numerics.sgd_step(net, grads_like(net, 3.0), lr=0.0, l2=0.1)
    assert numerics.max_abs_diff(net, new) == 0.0


def test_sgd_one_step_arithmetic():
    g = numerics.Gradients((np.array([[2.0]]),), (np.zeros(1),))
    assert numerics.sgd_step(scalar_net(1.0), g, lr=0.1, l2=0.0).weights[0][0, 0] == pytest.approx(0.8)


def test_sgd_decay_only():
    g = numerics.Gradients((np.array([[0.0]]),), (np.zeros(1),))
    # 1 - 0.1 * 0.5 * 1
    assert numerics.sgd_step(scalar_net(1.0), g, lr=0.1, l2=0.5).weights[0][0, 0] == pytest.approx(0.95)


def test_sgd_rejects_non_finite_gradient():
    g = numerics.Gradients((np.array([[np.nan]]),), (np.zeros(1),))
    with pytest.raises(numerics.NonFiniteError):
        numerics.sgd_step(scalar_net(1.0), g, lr=0.1)


def test_sgd_does_not_mutate_input():
    net = random_net([2, 3, 2], 0)
    before = [p.copy() for p in net.parameters()]
    numerics.sgd_step(net, grads_like(net, 1.0), lr=0.1, l2=0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


# init and serialization ------------------------------------------------

def test_init_is_seeded_and_within_glorot_bounds():
    a = numerics.init_network([2, 16, 16, 16, 2], 7)
    b = numerics.init_network([2, 16, 16, 16, 2], 7)
    assert numerics.max_abs_diff(a, b) == 0.0
    for w in a.weights:
        fan_in, fan_out = w.shape
        assert np.abs(w).max() <= math.sqrt(6 / (fan_in + fan_out))
    assert a.layer_sizes == [2, 16, 16, 16, 2]


def test_network_file_round_trip(tmp_path):
    net = random_net([2, 16, 16, 16, 2], 3)
    numerics.save_network(net, tmp_path / "m.json")
    back = numerics.load_network(tmp_path / "m.json")
    assert back.layer_sizes == net.layer_sizes
    assert all(np.array_equal(p, q) for p, q in zip(net.parameters(), back.parameters()))


def test_network_file_rejects_other_versions(tmp_path):
    d = numerics.network_to_dict(hand_net())
    d["version"] = 99
    with pytest.raises(ValueError, match="version"):
        numerics.network_from_dict(d)
