"""
Tests for the missing-mechanism simulators and artificial masking
"""

import numpy as np

from missing_mechanisms import (MechanismError, MechanismSpec, expected_missing_ratio, gen_adjacent_artificial,
                                gen_mar, gen_mcar, gen_mcar_artificial, gen_mnar_quantile, gen_mnar_subtype,
                                generate_mask)
from testing_utils import main, rng

N_ENTRIES = 1_000_000


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _gauss_expectation(func, lo=-12.0, hi=12.0, n=200001):
    grid = np.linspace(lo, hi, n)
    density = np.exp(-0.5 * grid ** 2) / np.sqrt(2.0 * np.pi)
    return float(np.trapz(density * func(grid), grid))


def _within(realized, expected, sigma, k=3.0):
    assert abs(realized - expected) <= k * sigma, f"{realized} vs {expected} ± {k}*{sigma}"


def _expect_error(func):
    try:
        func()
    except MechanismError:
        return
    raise AssertionError("expected MechanismError")


def test_mcar_ratio_matches_rate():
    sample = gen_mcar((1000, 1000), 0.2, rng(0))
    _within(sample.realized_missing_ratio, 0.2, np.sqrt(0.2 * 0.8 / N_ENTRIES))


def test_mcar_extremes():
    assert gen_mcar((10, 3), 0.0, rng(1)).mask.min() == 1.0
    assert gen_mcar((10, 3), 1.0, rng(1)).mask.max() == 0.0


def test_logistic_mnar_matches_quadrature_oracle():
    oracle = _gauss_expectation(lambda x: _logistic(5.0 * (x - 0.8)))
    x = rng(2).standard_normal((N_ENTRIES // 5, 5))
    spec = MechanismSpec('mnar_logistic', {'W': 5.0, 'b': 0.8})
    sample = generate_mask(spec, x, rng(3))
    _within(sample.realized_missing_ratio, oracle, np.sqrt(oracle * (1 - oracle) / N_ENTRIES))

    expected, sigma = expected_missing_ratio(spec, x)
    _within(sample.realized_missing_ratio, expected, sigma)


def test_logistic_mnar_hides_large_values():
    x = rng(4).standard_normal((20000, 2))
    mask = generate_mask(MechanismSpec('mnar_logistic'), x, rng(5)).mask
    assert x[mask == 0.0].mean() > x[mask == 1.0].mean() + 0.5


def test_self_censor_equals_logistic():
    x = rng(6).standard_normal((100, 4))
    a = gen_mnar_subtype('self_censor', x, {'W': 5.0, 'b': 0.8}, rng(7)).mask
    b = generate_mask(MechanismSpec('mnar_logistic'), x, rng(7)).mask
    assert np.array_equal(a, b)


def test_latent_mnar_matches_double_quadrature():
    grid = np.linspace(-10.0, 10.0, 2001)
    density = np.exp(-0.5 * grid ** 2) / np.sqrt(2.0 * np.pi)
    inner = np.trapz(density[None, :] * _logistic(5.0 * (grid[:, None] - 0.8) + grid[None, :]), grid, axis=1)
    oracle = float(np.trapz(density * inner, grid))

    n_rows = N_ENTRIES // 5
    x = rng(8).standard_normal((n_rows, 5))
    spec = MechanismSpec('mnar_latent', {'latent_dim': 3, 'effect_scale': 1.0})
    sample = generate_mask(spec, x, rng(9))
    # entries in a row share the latent draw, so rows are the independent units
    _within(sample.realized_missing_ratio, oracle, np.sqrt(oracle * (1 - oracle) / n_rows))

    expected, _ = expected_missing_ratio(spec, x)
    assert abs(expected - oracle) < 0.01


def test_quantile_mnar_is_exact():
    x = rng(10).standard_normal((1000, 4))
    sample = gen_mnar_quantile(x, 0.25, 0.5, rng(11))
    affected = np.flatnonzero((sample.mask == 0.0).any(axis=0))
    assert affected.size == 2
    for col in affected:
        assert int((sample.mask[:, col] == 0.0).sum()) == 250
        assert x[sample.mask[:, col] == 0.0, col].min() > x[sample.mask[:, col] == 1.0, col].max()
    assert sample.realized_missing_ratio == 0.125
    assert expected_missing_ratio(MechanismSpec('mnar_quantile', {'q': 0.25, 'feature_fraction': 0.5}), x) \
        == (0.125, 0.0)


def test_quantile_without_selected_column_is_error():
    _expect_error(lambda: gen_mnar_quantile(np.zeros((5, 3)), 0.3, 0.1, rng(0)))


def test_truncation_hides_outside_bounds():
    x = np.array([[-2.0, 0.0, 0.5, 1.5]])
    sample = gen_mnar_subtype('truncation', x, {'lower': -1.0, 'upper': 1.0}, rng(0))
    assert np.array_equal(sample.mask, [[0.0, 1.0, 1.0, 0.0]])
    one_sided = gen_mnar_subtype('truncation', x, {'lower': None, 'upper': 1.0}, rng(0))
    assert np.array_equal(one_sided.mask, [[1.0, 1.0, 1.0, 0.0]])


def test_truncation_bounds_validated():
    _expect_error(lambda: MechanismSpec('mnar_truncation', {'lower': 2.0, 'upper': 1.0}))


def test_mar_keeps_drivers_observed():
    x = rng(12).standard_normal((5000, 3))
    sample = gen_mar(x, [0], 2.0, 0.0, rng(13))
    assert sample.mask[:, 0].min() == 1.0
    missing_rows = (sample.mask[:, 1:] == 0.0).any(axis=1)
    assert x[missing_rows, 0].mean() > x[~missing_rows, 0].mean()


def test_mar_constant_probability_hits_target_rate():
    # slope 0: every non-driver entry is missing with sigmoid(offset) = 0.25
    x = rng(14).standard_normal((N_ENTRIES // 10, 11))
    sample = gen_mar(x, [0], 0.0, float(np.log(0.25 / 0.75)), rng(15))
    rate = 1.0 - sample.mask[:, 1:].mean()
    assert abs(rate - 0.25) <= 0.005, rate
    expected, _ = expected_missing_ratio(MechanismSpec('mar', {'driver_columns': [0], 'slope': 0.0,
                                                               'offset': float(np.log(1.0 / 3.0))}), x)
    assert abs(expected - 0.25 * 10 / 11) < 1e-12


def test_mar_all_drivers_is_error():
    _expect_error(lambda: gen_mar(np.zeros((4, 2)), [0, 1], 1.0, 0.0, rng(0)))


def test_spec_rejects_unknown_kind_and_param():
    _expect_error(lambda: MechanismSpec('mnar_magic'))
    _expect_error(lambda: MechanismSpec('mcar', {'rate': 0.1}))
    _expect_error(lambda: MechanismSpec('mcar', {'p': 1.5}))


def test_adjacent_prefers_neighbours_of_missing():
    m = np.array([[1.0, 1.0, 0.0, 1.0, 1.0]])  # K=1, L=5
    a = gen_adjacent_artificial(m, 0.5, (1, 5), rng(14))
    assert np.array_equal(a, [[0.0, 1.0, 0.0, 1.0, 0.0]])


def test_adjacent_shortfall_drawn_from_observed():
    m = np.ones((4, 10))
    m[0, 3] = 0.0
    a = gen_adjacent_artificial(m, 0.5, (2, 5), rng(15))
    assert int(a.sum()) == int(np.floor(0.5 * m.sum()))
    assert np.all(a <= m)
    assert a[0, 2] == 1.0 and a[0, 4] == 1.0


def test_adjacent_respects_feature_boundaries():
    # missing at the last step of feature 0; the first step of feature 1 is not its neighbour
    m = np.array([[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]])  # K=2, L=3
    a = gen_adjacent_artificial(m, 0.2, (2, 3), rng(16))
    assert np.array_equal(a, [[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]])


def test_artificial_rate_bounds():
    _expect_error(lambda: gen_adjacent_artificial(np.ones((2, 2)), 1.5, None, rng(0)))
    _expect_error(lambda: gen_mcar_artificial(np.ones((2, 2)), -0.1, rng(0)))
    assert gen_mcar_artificial(np.ones((3, 3)), 0.0, rng(0)).sum() == 0.0


def test_masks_are_reproducible():
    x = rng(17).standard_normal((50, 4))
    spec = MechanismSpec('mnar_logistic')
    assert np.array_equal(generate_mask(spec, x, rng(18)).mask, generate_mask(spec, x, rng(18)).mask)


TESTS = [
    ("MCAR ratio", test_mcar_ratio_matches_rate),
    ("MCAR extremes", test_mcar_extremes),
    ("Logistic MNAR vs quadrature", test_logistic_mnar_matches_quadrature_oracle),
    ("Logistic MNAR direction", test_logistic_mnar_hides_large_values),
    ("Self-censoring subtype", test_self_censor_equals_logistic),
    ("Latent MNAR vs quadrature", test_latent_mnar_matches_double_quadrature),
    ("Quantile MNAR", test_quantile_mnar_is_exact),
    ("Quantile column selection", test_quantile_without_selected_column_is_error),
    ("Truncation", test_truncation_hides_outside_bounds),
    ("Truncation bounds", test_truncation_bounds_validated),
    ("MAR drivers", test_mar_keeps_drivers_observed),
    ("MAR constant rate", test_mar_constant_probability_hits_target_rate),
    ("MAR all drivers", test_mar_all_drivers_is_error),
    ("Spec validation", test_spec_rejects_unknown_kind_and_param),
    ("Adjacent masking", test_adjacent_prefers_neighbours_of_missing),
    ("Adjacent shortfall", test_adjacent_shortfall_drawn_from_observed),
    ("Adjacent feature boundary", test_adjacent_respects_feature_boundaries),
    ("Artificial rate bounds", test_artificial_rate_bounds),
    ("Reproducible masks", test_masks_are_reproducible),
]


if __name__ == '__main__':
    main("MISSING MECHANISMS", TESTS)
