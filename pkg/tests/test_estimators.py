from dataclasses import replace

import numpy as np
import pytest

from drrel.click_sim import ClickModelParams, Document, FixedPolicy, Query, QueryCatalog, ShufflePolicy, \
    simulate_sessions
from drrel.estimators import (
    BiasVarianceReport, EstimatorParams, RelevanceEstimate, affine_bias_variance, affine_estimate, affine_estimator,
    clamp_estimate, dr_bias_variance, dr_estimate, dr_estimator, estimate_theta_from_randomized_logs, exact_moments,
    group_interactions, ipw_bias, ipw_estimate, ipw_estimator, mc_bias_variance, naive_ctr, naive_estimator,
    oracle_e_hat, pool_reports,
)
from drrel.exceptions import AlignmentError, CoverageError, DomainError, EmptyDataError, PropensityError


@pytest.fixture
def single():
    """theta=0.5, eps+=0.9, eps-=0.1: alpha=0.4, beta=0.05, gap=0.8."""
    true = ClickModelParams([0.5], 0.9, 0.1)
    return true, EstimatorParams.from_click_model(true)


@pytest.fixture
def trust():
    return ClickModelParams([1.0, 0.6, 0.35, 0.2], [0.95, 0.9, 0.9, 0.85], [0.15, 0.1, 0.08, 0.05])


def test_naive_ctr():
    assert naive_ctr([(1, 1), (3, 1)]).value == 1.0
    estimate = naive_ctr([(1, 1), (2, 0)])
    assert estimate.value == 0.5
    assert estimate.kind == 'naive' and estimate.count == 2
    with pytest.raises(EmptyDataError):
        naive_ctr([])
    with pytest.raises(DomainError):
        naive_ctr([(1, 2)])


def test_naive_ctr_is_biased(trust):
    # shown at position 2 only, the click rate converges to alpha_2 * gamma + beta_2
    gamma = 0.8
    mean, _ = exact_moments(naive_estimator(), trust, gamma, [2] * 6)
    assert mean == pytest.approx(trust.alpha[1] * gamma + trust.beta[1])
    assert abs(mean - gamma) > 0.1


def test_ipw_estimate():
    assert ipw_estimate([(1, 1)], [1.0]).value == 1.0
    assert ipw_estimate([(2, 1), (2, 0)], [1.0, 0.5]).value == 1.0
    with pytest.raises(PropensityError):
        ipw_estimate([(2, 1)], [1.0, 0.0])
    with pytest.raises(EmptyDataError):
        ipw_estimate([], [1.0])
    with pytest.raises(DomainError):
        ipw_estimate([(3, 1)], [1.0, 0.5])


def test_affine_estimate(single):
    _, est = single
    assert est.alpha_hat[0] == pytest.approx(0.4)
    assert est.beta_hat[0] == pytest.approx(0.05)
    assert affine_estimate([(1, 1)], est).value == pytest.approx(2.375)
    assert affine_estimate([(1, 0)], est).value == pytest.approx(-0.125)
    assert clamp_estimate(affine_estimate([(1, 1)], est)).value == 1.0
    assert clamp_estimate(affine_estimate([(1, 0)], est)).value == 0.0
    with pytest.raises(EmptyDataError):
        affine_estimate([], est)


def test_dr_estimate(single):
    _, est = single
    data = [(1, 1), (1, 0), (1, 0)]
    affine = affine_estimate(data, est).value
    assert dr_estimate([], est, 0.37, []).value == 0.37
    assert dr_estimate([], est, 0.37, []).count == 0
    # e_hat * gap == alpha_hat: the imputation term vanishes
    assert dr_estimate(data, est, 0.9, [0.5, 0.5, 0.5]).value == pytest.approx(affine, abs=1e-15)
    assert dr_estimate(data, est, 0.3, [0.0, 0.0, 0.0]).value == pytest.approx(0.3 + affine)
    # click-conditional pairs pick the entry matching each click
    conditional = dr_estimate(data, est, 0.3, [(0.0, 0.5), (0.5, 0.0), (0.5, 0.0)]).value
    assert conditional == pytest.approx(affine)
    with pytest.raises(AlignmentError):
        dr_estimate(data, est, 0.3, [0.5, 0.5])


def test_estimate_types():
    with pytest.raises(DomainError):
        RelevanceEstimate(0.5, 'cascade', 1)
    with pytest.raises(DomainError):
        RelevanceEstimate(0.5, 'dr', -1)
    assert RelevanceEstimate(1.5, 'affine', 1).to_dict() == {'value': 1.5, 'kind': 'affine', 'count': 1}
    with pytest.raises(DomainError):
        EstimatorParams([0.0], [0.1], [0.5], [0.9], [0.1])
    with pytest.raises(DomainError):
        EstimatorParams([0.4, 0.2], [0.1], [0.5, 0.3, 0.1], [0.9], [0.1])


def test_from_click_model_misspecification(trust):
    est = EstimatorParams.from_click_model(trust, {'alpha': 0.8, 'beta': 2.0})
    np.testing.assert_allclose(est.alpha_hat, 0.8 * trust.alpha)
    np.testing.assert_allclose(est.beta_hat, 2.0 * trust.beta)
    np.testing.assert_allclose(est.theta_hat, trust.theta)
    np.testing.assert_allclose(est.eps_gap_hat, trust.eps_plus - trust.eps_minus)
    clipped = EstimatorParams.from_click_model(trust, {'theta': 5.0})
    assert np.all(clipped.theta_hat <= 1.0)


def test_affine_bias_closed_form(single, trust):
    true, matched = single
    bias, _ = affine_bias_variance([1], true, matched, 0.6)
    assert bias == pytest.approx(0.0, abs=1e-15)
    low_alpha = EstimatorParams.from_click_model(true, {'alpha': 0.8})
    for gamma in (0.1, 0.5, 0.9):
        bias, _ = affine_bias_variance([1], true, low_alpha, gamma)
        assert bias == pytest.approx(0.25 * gamma)

    mis = EstimatorParams.from_click_model(trust, {'alpha': 1.15, 'beta': 0.7})
    positions = [1, 2, 2, 4, 3]
    analytic, _ = affine_bias_variance(positions, trust, mis, 0.35)
    mean, _ = exact_moments(affine_estimator(mis), trust, 0.35, positions)
    assert abs(mean - 0.35 - analytic) < 1e-10


def test_affine_variance_single_position(trust):
    mis = EstimatorParams.from_click_model(trust, {'alpha': 0.9, 'beta': 1.2})
    for k in (1, 3):
        mean, variance = exact_moments(affine_estimator(mis), trust, 0.4, [k])
        _, formula = affine_bias_variance([k], trust, mis, 0.4, gamma_aff_hat=mean)
        assert formula == pytest.approx(variance, abs=1e-12)


def test_affine_variance_scales_with_d(trust):
    est = EstimatorParams.from_click_model(trust)
    _, v2 = exact_moments(affine_estimator(est), trust, 0.5, [2, 2])
    _, v4 = exact_moments(affine_estimator(est), trust, 0.5, [2, 2, 2, 2])
    assert abs(v4 - v2 / 2) < 1e-10


def test_dr_double_robustness_matched_params(trust):
    est = EstimatorParams.from_click_model(trust)
    positions = [1, 2, 3, 4, 2]
    gamma, wrong_imp = 0.6, 0.3
    # e_hat = theta makes alpha-tilde equal alpha-hat
    e_hat = trust.theta[np.asarray(positions) - 1]
    bias, _, _ = dr_bias_variance(positions, trust, est, gamma, wrong_imp, e_hat)
    assert abs(bias) <= 1e-12
    mean, _ = exact_moments(dr_estimator(est, wrong_imp, e_hat), trust, gamma, positions)
    assert abs(mean - gamma) <= 1e-12


def test_dr_double_robustness_exact_imputation(trust):
    est = EstimatorParams.from_click_model(trust, {'alpha': 0.8})
    positions = [1, 1, 3, 4]
    gamma = 0.45
    e_hat = oracle_e_hat(trust, positions, gamma)
    bias, _, _ = dr_bias_variance(positions, trust, est, gamma, gamma, e_hat)
    assert abs(bias) <= 1e-12
    mean, _ = exact_moments(dr_estimator(est, gamma, e_hat), trust, gamma, positions)
    assert abs(mean - gamma) <= 1e-12
    # the affine estimator stays biased under the same misspecification
    affine_mean, _ = exact_moments(affine_estimator(est), trust, gamma, positions)
    assert abs(affine_mean - gamma) > 0.01


def test_dr_bias_matches_enumeration(trust):
    est = EstimatorParams.from_click_model(trust, {'alpha': 1.1, 'beta': 0.8, 'eps_plus': 0.95})
    positions = [4, 2, 2, 1, 3, 3]
    gamma, gamma_imp = 0.25, 0.55
    e_hat = np.column_stack([np.linspace(0.2, 0.7, 6), np.ones(6)])
    bias, variance, delta = dr_bias_variance(positions, trust, est, gamma, gamma_imp, e_hat)
    mean, _ = exact_moments(dr_estimator(est, gamma_imp, e_hat), trust, gamma, positions)
    assert abs(mean - gamma - bias) < 1e-10
    assert delta.shape == (6,)
    assert np.isfinite(variance)


def test_dr_delta_negative_without_click(single):
    true, est = single
    e_hat = oracle_e_hat(true, [1], 0.5)
    _, _, delta = dr_bias_variance([1], true, est, 0.5, 0.3, e_hat, clicks=[0])
    assert delta[0] == pytest.approx(-0.105625)
    with pytest.raises(AlignmentError):
        dr_bias_variance([1], true, est, 0.5, 0.3, e_hat, clicks=[0, 1])


def test_oracle_e_hat(single):
    true, _ = single
    e = oracle_e_hat(true, [1, 1], 0.5)
    assert e.shape == (2, 2)
    np.testing.assert_allclose(e[:, 1], 1.0)
    np.testing.assert_allclose(e[:, 0], 1.0 / 3.0)


def test_ipw_bias(trust):
    pbm = ClickModelParams(trust.theta, 1.0, 0.0)
    positions = [1, 2, 4]
    assert ipw_bias(positions, pbm, pbm.theta, 0.7) == pytest.approx(0.0, abs=1e-15)
    mean, _ = exact_moments(ipw_estimator(pbm.theta), pbm, 0.7, positions)
    assert abs(mean - 0.7) < 1e-12
    biased = ipw_bias(positions, trust, trust.theta, 0.7)
    mean, _ = exact_moments(ipw_estimator(trust.theta), trust, 0.7, positions)
    assert abs(biased) > 1e-3
    assert abs(mean - 0.7 - biased) < 1e-10


def test_exact_moments_limit(trust):
    with pytest.raises(DomainError):
        exact_moments(naive_estimator(), trust, 0.5, [1] * 13)


def test_mc_constant_estimator(trust):
    report = mc_bias_variance(lambda positions, clicks: 0.4, trust, 0.4, [1, 2], replications=50, seed=1)
    assert report.empirical_bias == pytest.approx(0.0, abs=1e-15)
    assert report.empirical_variance == 0.0
    assert report.mc_standard_error == 0.0
    assert report.exact_bias == pytest.approx(0.0, abs=1e-12)
    assert report.replications == 50 and report.interactions == 2


def test_mc_matched_affine(trust):
    est = EstimatorParams.from_click_model(trust)
    positions = [1, 2, 3]
    analytic = affine_bias_variance(positions, trust, est, 0.3)
    report = mc_bias_variance(affine_estimator(est), trust, 0.3, positions, replications=2000, seed=7,
                              analytic=analytic)
    assert abs(report.exact_bias) < 1e-12
    assert report.analytic_bias == pytest.approx(0.0, abs=1e-15)
    assert report.mc_standard_error > 0
    assert abs(report.empirical_bias) < 4 * report.mc_standard_error
    assert report.empirical_variance == pytest.approx(report.exact_variance, rel=0.15)


def test_mc_chunks_independent_of_jobs(trust):
    est = EstimatorParams.from_click_model(trust, {'alpha': 0.8})
    run = lambda jobs: mc_bias_variance(affine_estimator(est), trust, 0.5, [1, 4], replications=1000, seed=3,
                                        chunks=4, jobs=jobs)
    serial, threaded = run(1), run(4)
    assert serial.empirical_bias == threaded.empirical_bias
    assert serial.empirical_variance == threaded.empirical_variance
    assert serial.replications == threaded.replications == 1000
    with pytest.raises(DomainError):
        mc_bias_variance(naive_estimator(), trust, 0.5, [1], replications=1, seed=0)
    with pytest.raises(DomainError):
        mc_bias_variance(naive_estimator(), trust, 0.5, [5], replications=10, seed=0)


def test_pool_reports():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0])

    def chunk(values):
        var = float(values.var(ddof=1))
        return BiasVarianceReport(0.0, 0.0, float(values.mean()), var, (var / values.size) ** 0.5,
                                  replications=values.size)

    pooled = pool_reports([chunk(a), chunk(b)])
    assert pooled.replications == 5
    assert pooled.empirical_bias == pytest.approx(3.0)
    assert pooled.empirical_variance == pytest.approx(2.5)
    assert pooled.mc_standard_error == pytest.approx((2.5 / 5) ** 0.5)
    with pytest.raises(EmptyDataError):
        pool_reports([])


def _two_doc_catalog():
    docs = (Document('q-d0', 0.3, 0), Document('q-d1', 0.7, 1))
    return QueryCatalog((Query('q', 1.0, docs),))


def test_estimate_theta_from_randomized_logs():
    pbm = ClickModelParams([1.0, 0.5], 1.0, 0.0)
    sessions = list(simulate_sessions(_two_doc_catalog(), pbm, ShufflePolicy(), 20000, seed=5))
    theta_hat = estimate_theta_from_randomized_logs(sessions)
    assert theta_hat[0] == 1.0
    assert abs(theta_hat[1] - 0.5) < 0.03


def test_estimate_theta_coverage():
    pbm = ClickModelParams([1.0, 0.5], 1.0, 0.0)
    never = ClickModelParams([1.0, 0.5], 0.9, 0.0)
    catalog = QueryCatalog((Query('q', 1.0, (Document('q-d0', 0.0, 0), Document('q-d1', 0.0, 1))),))
    no_clicks = list(simulate_sessions(catalog, never, FixedPolicy(), 1, seed=1))
    with pytest.raises(CoverageError):
        estimate_theta_from_randomized_logs(no_clicks)
    sessions = list(simulate_sessions(_two_doc_catalog(), pbm, ShufflePolicy(), 50, seed=5))
    with pytest.raises(CoverageError):
        estimate_theta_from_randomized_logs(sessions, num_positions=3)
    with pytest.raises(CoverageError):
        estimate_theta_from_randomized_logs([])


def test_group_interactions():
    pbm = ClickModelParams([1.0, 0.5], 1.0, 0.0)
    sessions = list(simulate_sessions(_two_doc_catalog(), pbm, FixedPolicy(), 10, seed=5))
    grouped = group_interactions(sessions)
    assert set(grouped) == {('q', 'q-d0'), ('q', 'q-d1')}
    assert [p for p, _, _ in grouped[('q', 'q-d1')]] == [2] * 10
    assert all(e is None for _, _, e in grouped[('q', 'q-d0')])


def test_constant_estimator_has_zero_spread_across_chunks(trust):
    # 0.1 does not survive a float round trip through sum / n
    report = mc_bias_variance(lambda positions, clicks: 0.1, trust, 0.3, [1, 3], replications=301, seed=4,
                              chunks=7)
    assert report.empirical_variance == 0.0
    assert report.mc_standard_error == 0.0
    assert report.empirical_bias == pytest.approx(-0.2, abs=1e-15)
    flat = BiasVarianceReport(0.0, 0.0, 0.1, 0.0, 0.0, replications=3)
    assert pool_reports([flat, flat, replace(flat, replications=11)]).empirical_variance == 0.0
