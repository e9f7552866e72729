"""
Tests for the pattern recognizer: predictions, loss, input gradient, training
"""

import numpy as np

from missing_mechanisms import MechanismSpec, generate_mask
from numerics import OptimizerState, finite_diff_check
from pattern_recognizer import PatternRecognizer, pr_input_grad, pr_loss, pr_predict, pr_train_step
from testing_utils import main, rng


def _recognizer(data_dim=4, seed=0, scheme='xavier', width=16):
    return PatternRecognizer.initialize(data_dim, hidden_width=width, rng=rng(seed), scheme=scheme)


def _reference_bce(m, probs):
    probs = np.clip(probs, 1e-300, 1.0)
    one_minus = np.clip(1.0 - probs, 1e-300, 1.0)
    return float(np.mean(-(m * np.log(probs) + (1.0 - m) * np.log(one_minus))))


def test_zero_recognizer_predicts_half_and_ln2():
    pr = _recognizer(scheme='zeros')
    x = rng(1).normal(size=(6, 4))
    m = (rng(2).random((6, 4)) < 0.5).astype(float)
    assert np.array_equal(pr_predict(pr, x), np.full((6, 4), 0.5))
    assert abs(pr_loss(m, x, pr) - np.log(2.0)) < 1e-15


def test_default_width_is_capped():
    assert PatternRecognizer.initialize(5, rng=rng(0)).net.layer_dims == [5, 40, 40, 40, 5]
    assert PatternRecognizer.initialize(100, rng=rng(0)).net.layer_dims[1] == 512


def test_loss_matches_reference_bce():
    pr = _recognizer(seed=3)
    x = rng(4).normal(size=(8, 4))
    m = (rng(5).random((8, 4)) < 0.5).astype(float)
    assert abs(pr_loss(m, x, pr) - _reference_bce(m, pr_predict(pr, x))) < 1e-12
    assert pr_loss(m, x, pr) >= 0.0


def test_perfect_recognizer_has_tiny_loss():
    # one hidden unit passes x[0] through; the output layer thresholds it far past the clamp
    from numerics import Mlp
    weights = [np.array([[1.0], [0.0]]), np.array([[1000.0, 1000.0]])]
    biases = [np.zeros(1), np.array([-500.0, -500.0])]
    pr = PatternRecognizer(Mlp([2, 1, 2], weights, biases, 'relu', 'sigmoid'))
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    m = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert pr_loss(m, x, pr) < 1e-10


def test_input_grad_is_zero_for_zero_recognizer():
    pr = _recognizer(scheme='zeros')
    x = rng(6).normal(size=(5, 4))
    m = (rng(7).random((5, 4)) < 0.5).astype(float)
    assert np.array_equal(pr_input_grad(m, x, pr), np.zeros((5, 4)))


def test_input_grad_matches_finite_differences():
    for seed in range(50):  # 50 random (net, input, mask) triples
        pr = _recognizer(seed=seed)
        r = rng(100 + seed)
        m = (r.random((3, 4)) < 0.5).astype(float)

        def objective(x, pr=pr, m=m):
            return pr_loss(m, x, pr), pr_input_grad(m, x, pr)

        check = finite_diff_check(objective, r.normal(size=(3, 4)))
        assert check.max_relative_error < 1e-5, (seed, check)


def test_row_mean_reduction_scales_by_rows():
    pr = _recognizer(seed=8)
    x = rng(9).normal(size=(5, 4))
    m = (rng(10).random((5, 4)) < 0.5).astype(float)
    assert np.allclose(pr_input_grad(m, x, pr, reduction='row_mean'), 5.0 * pr_input_grad(m, x, pr))
    single = pr_input_grad(m[2], x[2], pr, reduction='row_mean')
    assert np.allclose(single, pr_input_grad(m, x, pr, reduction='row_mean')[2])


def test_train_step_with_zero_lr_keeps_parameters():
    pr = _recognizer(seed=11)
    before = pr.net.copy()
    x = rng(12).normal(size=(6, 4))
    m = np.ones((6, 4))
    pr_train_step(pr, m, x, 0.0, OptimizerState(pr.net))
    assert pr.net.equals(before)


def test_overfits_one_batch():
    pr = _recognizer(seed=13)
    x = rng(14).normal(size=(32, 4))
    m = generate_mask(MechanismSpec('mnar_logistic', {'W': 5.0, 'b': 0.0}), x, rng(15)).mask
    state = OptimizerState(pr.net)
    for _ in range(300):
        pr_train_step(pr, m, x, 1e-2, state)
    assert pr_loss(m, x, pr) < np.log(2.0) - 0.1


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        pr = _recognizer(seed=16)
        x = rng(17).normal(size=(10, 4))
        m = (rng(18).random((10, 4)) < 0.5).astype(float)
        state = OptimizerState(pr.net)
        for _ in range(5):
            pr_train_step(pr, m, x, 1e-3, state)
        runs.append(pr.net)
    assert runs[0].equals(runs[1])


TESTS = [
    ("Zero recognizer", test_zero_recognizer_predicts_half_and_ln2),
    ("Default width", test_default_width_is_capped),
    ("Loss vs reference BCE", test_loss_matches_reference_bce),
    ("Perfect recognizer", test_perfect_recognizer_has_tiny_loss),
    ("Zero input gradient", test_input_grad_is_zero_for_zero_recognizer),
    ("Input gradient vs finite differences", test_input_grad_matches_finite_differences),
    ("Row-mean reduction", test_row_mean_reduction_scales_by_rows),
    ("Zero learning rate", test_train_step_with_zero_lr_keeps_parameters),
    ("Overfit one batch", test_overfits_one_batch),
    ("Deterministic training", test_training_is_deterministic),
]


if __name__ == '__main__':
    main("PATTERN RECOGNIZER", TESTS)
