"""
Test Output-Perturbation Privacy
Validates sensitivity calibration, the Gaussian mechanism, composition and the empirical oracle
"""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from services.datamodel import HeadParams, PrivacyParams
from services.erm import FitResult
from services.errors import RejectedInputError, SanitizationRefusedError
from services.event_logger import get_event_logger
from services.experiment import ORACLE_GRID, verify_sensitivity
from services.privacy import (
    NoiseScale,
    PrivacySpend,
    SensitivityProblemTemplate,
    SpendRecord,
    compose,
    empirical_sensitivity,
    gaussian_sigma,
    l2_sensitivity,
    privatize,
    sanitize,
    stream_for,
)


ORACLE_TRIALS = 200
ORACLE_SLACK = 1e-6
SANITIZE_DRAWS = 10_000


def _converged(matrix) -> FitResult:
    return FitResult(HeadParams(matrix), 1e-9, 12, True)


def _spend(*pairs) -> PrivacySpend:
    spend = PrivacySpend()
    for eps, delta in pairs:
        spend = spend.add(SpendRecord(eps, delta, 'classes'))
    return spend


# ============================================
# Calibration
# ============================================

def test_sensitivity_closed_form():
    assert l2_sensitivity(10, 0.01, 2500).value == pytest.approx(0.252982, abs=1e-6)
    assert l2_sensitivity(10, 0.01, 2500).value == pytest.approx(2 * math.sqrt(10) / 25, rel=1e-15)
    assert l2_sensitivity(2, 10.0, 10, binary=True).value == pytest.approx(0.02, rel=1e-15)


def test_sensitivity_halves_when_data_doubles():
    for n in (1, 7, 2500):
        assert l2_sensitivity(4, 0.3, 2 * n).value == pytest.approx(l2_sensitivity(4, 0.3, n).value / 2, rel=1e-15)


def test_sensitivity_rejects_bad_parameters():
    for args in ((1, 0.1, 10), (10, 0.0, 10), (10, 0.1, 0)):
        with pytest.raises(RejectedInputError):
            l2_sensitivity(*args)


def test_gaussian_sigma_reference_value():
    bound = l2_sensitivity(10, 0.01, 2500)
    noise = gaussian_sigma(0.5, 1e-5, bound)
    closed_form = 2.0 * math.log(1.25 / 1e-5) * bound.value ** 2 / 0.5 ** 2

    assert noise.sigma_squared == pytest.approx(6.0089, abs=1e-4)
    assert noise.sigma_squared == pytest.approx(closed_form, rel=1e-12)


def test_gaussian_sigma_scales_with_inverse_epsilon_squared():
    bound = l2_sensitivity(10, 0.01, 2500)
    base = gaussian_sigma(0.1, 1e-5, bound).sigma_squared

    assert gaussian_sigma(0.2, 1e-5, bound).sigma_squared == pytest.approx(base / 4, rel=1e-12)


def test_gaussian_sigma_validation_and_warning():
    bound = l2_sensitivity(2, 1.0, 10)
    for eps, delta in ((0.0, 1e-5), (0.5, 0.0), (0.5, 1.0)):
        with pytest.raises(RejectedInputError):
            gaussian_sigma(eps, delta, bound)

    gaussian_sigma(1.5, 1e-5, bound)
    assert get_event_logger().get_event_summary()['epsilon_above_one'] == 1


# ============================================
# Sanitization
# ============================================

def test_zero_noise_is_identity():
    matrix = np.random.default_rng(0).standard_normal((3, 4))
    out = sanitize(_converged(matrix), NoiseScale.disabled(), np.random.default_rng(1))

    np.testing.assert_array_equal(out.matrix, matrix)


def test_sanitize_is_deterministic_per_stream():
    fit_result = _converged(np.zeros((2, 5)))
    noise = NoiseScale(2.0)

    first = sanitize(fit_result, noise, np.random.default_rng(9))
    second = sanitize(fit_result, noise, np.random.default_rng(9))
    np.testing.assert_array_equal(first.matrix, second.matrix)


def test_sanitize_monte_carlo_moments():
    fit_result = _converged(np.zeros((2, 2)))
    rng = np.random.default_rng(11)
    draws = np.stack([
        sanitize(fit_result, NoiseScale(4.0), rng).matrix for _ in range(SANITIZE_DRAWS)
    ])

    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.1)
    np.testing.assert_allclose(draws.var(axis=0, ddof=1), 4.0, atol=0.2)


def test_sanitize_refuses_non_converged_fit():
    stalled = FitResult(HeadParams.zeros(2, 3), 0.5, 1000, False)
    with pytest.raises(SanitizationRefusedError):
        sanitize(stalled, NoiseScale.disabled(), np.random.default_rng(0))


def test_privatize_records_spend_only_when_enabled():
    fit_result = _converged(np.ones((1, 3)))
    bound = l2_sensitivity(2, 0.01, 100, binary=True)

    params, record = privatize(fit_result, PrivacyParams.disabled(), bound, np.random.default_rng(0), 'scores')
    assert record is None
    np.testing.assert_array_equal(params.matrix, fit_result.params.matrix)

    params, record = privatize(fit_result, PrivacyParams(0.1, 1e-5), bound, np.random.default_rng(0), 'scores')
    assert (record.epsilon, record.delta, record.mechanism) == (0.1, 1e-5, 'scores')
    assert not np.array_equal(params.matrix, fit_result.params.matrix)


def test_streams_are_independent_per_client_and_mechanism():
    first = stream_for(3, 0, 'scores').standard_normal(4)

    np.testing.assert_array_equal(first, stream_for(3, 0, 'scores').standard_normal(4))
    assert not np.array_equal(first, stream_for(3, 0, 'classes').standard_normal(4))
    assert not np.array_equal(first, stream_for(3, 1, 'scores').standard_normal(4))


# ============================================
# Composition
# ============================================

def test_compose_examples():
    assert compose(_spend((0.1, 1e-5), (0.5, 1e-5))) == pytest.approx((0.6, 2e-5))
    assert compose(PrivacySpend()) == (0.0, 0.0)
    assert compose(_spend((0.1, 1e-5), (1.0, 1e-5))) == pytest.approx((1.1, 2e-5))


@given(st.lists(
    st.tuples(st.floats(min_value=1e-3, max_value=10.0), st.floats(min_value=1e-9, max_value=1e-3)),
    max_size=12,
))
def test_compose_is_order_independent(pairs):
    assert compose(_spend(*pairs)) == compose(_spend(*reversed(pairs)))


def test_spend_ledger_skips_disabled_mechanisms():
    spend = PrivacySpend().add(None).add(SpendRecord(0.1, 1e-5, 'scores'))

    assert len(spend) == 1
    assert len(spend.merge(spend)) == 2
    with pytest.raises(RejectedInputError):
        SpendRecord(0.0, 1e-5, 'scores')


# ============================================
# Empirical sensitivity oracle
# ============================================

def test_oracle_binary_bound():
    template = SensitivityProblemTemplate(n=10, p=3, class_count=2, lam=10.0, binary=True)
    observed = empirical_sensitivity(template, ORACLE_TRIALS, np.random.default_rng(0))

    assert template.bound.value == pytest.approx(0.02)
    assert observed <= 0.02 + ORACLE_SLACK


def test_oracle_multiclass_bound():
    template = SensitivityProblemTemplate(n=20, p=3, class_count=4, lam=1.0)
    observed = empirical_sensitivity(template, ORACLE_TRIALS, np.random.default_rng(1))

    assert observed <= 2 * 2 / (1.0 * 20) + ORACLE_SLACK


def test_oracle_identical_replacement_is_zero():
    template = SensitivityProblemTemplate(n=15, p=2, class_count=3, lam=1.0, mode='identical')

    assert empirical_sensitivity(template, 10, np.random.default_rng(2)) <= 1e-8


@pytest.mark.parametrize("binary", [False, True])
def test_oracle_adversarial_pairs_are_not_vacuous(binary):
    template = SensitivityProblemTemplate(
        n=20, p=3, class_count=2 if binary else 4, lam=1.0, binary=binary, mode='adversarial'
    )
    observed = empirical_sensitivity(template, 20, np.random.default_rng(3))

    assert 0.01 * template.bound.value < observed <= template.bound.value + ORACLE_SLACK


@pytest.mark.slow
def test_oracle_grid_holds_at_full_trial_count():
    frame = verify_sensitivity(ORACLE_TRIALS, seed=0)

    assert len(frame) >= 6
    assert len(frame) == len(ORACLE_GRID)
    assert (frame['error'] == '').all()
    assert frame['ok'].all()
    assert (frame['observed'] <= frame['bound'] + ORACLE_SLACK).all()


def test_oracle_template_limits():
    with pytest.raises(RejectedInputError):
        SensitivityProblemTemplate(n=51, p=3, class_count=2, lam=1.0)
    with pytest.raises(RejectedInputError):
        SensitivityProblemTemplate(n=10, p=3, class_count=3, lam=1.0, binary=True)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
