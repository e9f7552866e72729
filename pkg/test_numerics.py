"""
Tests for the MLP, its gradients, the optimizers and the gradient checker
"""

import numpy as np

from numerics import (Gradients, Mlp, NonFiniteGradientError, OptimizerState, ShapeError, finite_diff_check,
                      mlp_backward, mlp_forward, mlp_logits, optimizer_step, sigmoid)
from testing_utils import main, rng


def _net(hidden='silu', output='identity', dims=(4, 6, 5, 3), seed=0):
    return Mlp.initialize(list(dims), hidden, output, rng(seed))


def test_forward_shapes():
    net = _net()
    assert mlp_forward(net, rng(1).normal(size=(7, 4))).shape == (7, 3)
    assert mlp_forward(net, np.ones(4)).shape == (3,)


def test_single_identity_layer_is_identity_map():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)], 'silu', 'identity')
    x = rng(20).normal(size=(4, 3))
    assert np.array_equal(mlp_forward(net, x), x)


def test_forward_matches_straight_line_oracle():
    net = _net(dims=(4, 6, 3), seed=21)
    x = rng(22).normal(size=(5, 4))
    z = x @ net.weights[0] + net.biases[0]
    hidden = z / (1.0 + np.exp(-z))
    expected = hidden @ net.weights[1] + net.biases[1]
    assert np.max(np.abs(mlp_forward(net, x) - expected)) < 1e-12


def test_zero_upstream_gives_zero_gradients():
    net = _net()
    grads = mlp_backward(net, rng(23).normal(size=(3, 4)), np.zeros((3, 3)))
    assert grads.global_norm() == 0.0
    assert np.array_equal(grads.input_grad, np.zeros((3, 4)))


def test_linear_layer_input_gradient():
    w = rng(24).normal(size=(4, 2))
    net = Mlp([4, 2], [w], [np.zeros(2)], 'silu', 'identity')
    g = rng(25).normal(size=(1, 2))
    assert np.allclose(mlp_backward(net, np.ones((1, 4)), g).input_grad, g @ w.T)


def test_forward_rejects_wrong_width():
    try:
        mlp_forward(_net(), np.ones((2, 5)))
    except ShapeError:
        return
    raise AssertionError("expected ShapeError")


def test_zero_initialized_sigmoid_net_outputs_half():
    net = Mlp.initialize([3, 8, 3], 'silu', 'sigmoid', scheme='zeros')
    out = mlp_forward(net, rng(2).normal(size=(4, 3)))
    assert np.array_equal(out, np.full((4, 3), 0.5))


def test_sigmoid_is_clamped_and_bounded():
    values = sigmoid(np.array([-1e4, -30.0, 0.0, 30.0, 1e4]))
    assert np.all(values > 0.0) and np.all(values < 1.0)
    assert values[0] == values[1] and values[-1] == values[-2]
    assert values[2] == 0.5


def test_parameter_gradients_match_finite_differences():
    for seed in range(5):
        for hidden, output in (('silu', 'identity'), ('silu', 'sigmoid')):
            net = _net(hidden, output, seed=seed)
            x = rng(100 + seed).normal(size=(3, 4))
            weights = rng(200 + seed).normal(size=(3, 3))

            def objective(flat, net=net, x=x, weights=weights):
                candidate = net.with_flat_parameters(flat)
                value = float(np.sum(weights * mlp_forward(candidate, x)))
                return value, mlp_backward(candidate, x, weights).flat()

            check = finite_diff_check(objective, net.flat_parameters())
            assert check.max_relative_error < 1e-5, (seed, hidden, output, check)


def test_input_gradient_matches_finite_differences():
    net = _net()
    weights = rng(3).normal(size=(2, 3))

    def objective(x):
        value = float(np.sum(weights * mlp_forward(net, x)))
        return value, mlp_backward(net, x, weights).input_grad

    assert float(finite_diff_check(objective, rng(4).normal(size=(2, 4)))) < 1e-5


def test_logit_gradient_mode_skips_sigmoid_derivative():
    net = _net(output='sigmoid')
    x = rng(5).normal(size=(2, 4))
    upstream = rng(6).normal(size=(2, 3))

    def objective(x_in):
        value = float(np.sum(upstream * mlp_logits(net, x_in)))
        return value, mlp_backward(net, x_in, upstream, wrt_logits=True).input_grad

    assert float(finite_diff_check(objective, x)) < 1e-5


def test_backward_rejects_mismatched_upstream():
    try:
        mlp_backward(_net(), np.ones((2, 4)), np.ones((2, 2)))
    except ShapeError:
        return
    raise AssertionError("expected ShapeError")


def test_adam_with_zero_lr_leaves_parameters_unchanged():
    net = _net()
    before = net.copy()
    grads = mlp_backward(net, rng(7).normal(size=(5, 4)), np.ones((5, 3)))
    state = OptimizerState(net, 'adam')
    optimizer_step(net, grads, state, 0.0)
    assert net.equals(before)
    assert state.step == 1


def test_sgd_step_moves_against_gradient():
    net = _net()
    before = net.flat_parameters()
    grads = mlp_backward(net, rng(8).normal(size=(5, 4)), np.ones((5, 3)))
    optimizer_step(net, grads, OptimizerState(net, 'sgd'), 0.1)
    assert np.allclose(net.flat_parameters(), before - 0.1 * grads.flat())


def test_nonfinite_gradient_names_layer():
    net = _net()
    grads = Gradients.zeros_like(net)
    grads.biases[1][0] = np.nan
    try:
        optimizer_step(net, grads, OptimizerState(net), 1e-3)
    except NonFiniteGradientError as e:
        assert 'layer 1 bias' in str(e)
        return
    raise AssertionError("expected NonFiniteGradientError")


def test_gradient_checker_flags_wrong_gradient():
    def objective(x):
        return float(np.sum(x ** 2)), x  # true gradient is 2x

    assert float(finite_diff_check(objective, np.array([1.0, -2.0, 3.0]))) > 0.1


def test_sgd_single_step_on_square():
    # f(w) = w^2 from w = 1: one plain step with lr 0.1 lands on 0.8
    net = Mlp([1, 1], [np.array([[1.0]])], [np.zeros(1)], 'silu', 'identity')
    w = net.weights[0][0, 0]
    grads = Gradients([np.array([[2.0 * w]])], [np.zeros(1)])
    optimizer_step(net, grads, OptimizerState(net, 'sgd'), 0.1)
    assert abs(net.weights[0][0, 0] - 0.8) < 1e-15


def test_sgd_on_convex_quadratic_never_increases_loss():
    net = Mlp.initialize([3, 1], 'silu', 'identity', rng(30))
    x = rng(31).normal(size=(20, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3

    def loss_and_grads():
        residual = mlp_forward(net, x) - y
        return float(np.mean(residual ** 2)), mlp_backward(net, x, 2.0 * residual / len(x))

    state = OptimizerState(net, 'sgd')
    losses = []
    for _ in range(100):
        loss, grads = loss_and_grads()
        losses.append(loss)
        optimizer_step(net, grads, state, 0.05)
    losses.append(loss_and_grads()[0])
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.01 * losses[0]


def test_gradient_checker_accepts_exact_gradients():
    def square(x):
        return float(np.sum(x ** 2)), 2.0 * x

    assert float(finite_diff_check(square, np.array([1.0]))) < 1e-8
    assert float(finite_diff_check(square, rng(32).normal(size=(3, 4)))) < 1e-8

    def constant(x):
        return 3.0, np.zeros_like(x)

    check = finite_diff_check(constant, rng(33).normal(size=5))
    assert check.max_relative_error == 0.0 and not check.nan_coordinates


def test_flat_parameter_round_trip():
    net = _net()
    assert net.with_flat_parameters(net.flat_parameters()).equals(net)
    assert net.flat_parameters().size == net.parameter_count()


TESTS = [
    ("Forward shapes", test_forward_shapes),
    ("Identity map", test_single_identity_layer_is_identity_map),
    ("Forward vs straight-line oracle", test_forward_matches_straight_line_oracle),
    ("Zero upstream", test_zero_upstream_gives_zero_gradients),
    ("Linear input gradient", test_linear_layer_input_gradient),
    ("Forward width check", test_forward_rejects_wrong_width),
    ("Zero-initialized sigmoid output", test_zero_initialized_sigmoid_net_outputs_half),
    ("Clamped sigmoid", test_sigmoid_is_clamped_and_bounded),
    ("Parameter gradients vs finite differences", test_parameter_gradients_match_finite_differences),
    ("Input gradient vs finite differences", test_input_gradient_matches_finite_differences),
    ("Logit-gradient mode", test_logit_gradient_mode_skips_sigmoid_derivative),
    ("Upstream shape check", test_backward_rejects_mismatched_upstream),
    ("Adam with lr 0", test_adam_with_zero_lr_leaves_parameters_unchanged),
    ("SGD step", test_sgd_step_moves_against_gradient),
    ("SGD on w^2", test_sgd_single_step_on_square),
    ("SGD on a convex quadratic", test_sgd_on_convex_quadratic_never_increases_loss),
    ("Non-finite gradient error", test_nonfinite_gradient_names_layer),
    ("Gradient checker sensitivity", test_gradient_checker_flags_wrong_gradient),
    ("Gradient checker on exact gradients", test_gradient_checker_accepts_exact_gradients),
    ("Flat parameter round trip", test_flat_parameter_round_trip),
]


if __name__ == '__main__':
    main("NUMERICS", TESTS)
