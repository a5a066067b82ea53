import math

import numpy as np
import pytest
from scipy import stats

from app.core.errors import InputDataError
from app.models.distributions import DiscreteDistribution
from app.models.risk_models import FatalityCurve, ModelWeights, RiskEstimate
from app.models.speed_models import Condition, CrashType
from app.services.density_service import density_cdf, kde_fit
from app.services.fatality_service import fatality_probability
from app.services.risk_service import (
    COMPARABLE,
    RISKIER,
    SAFER,
    build_condition_distributions,
    closed_form_risk,
    compare_to_baseline,
    condition_distributions_from_dict,
    condition_distributions_to_dict,
    expected_value_closed_form,
    marginal_speed_distribution,
    monte_carlo_risk,
    risk_table,
    shift_distributions,
    trial_generator,
    zone_marginal,
)
from conftest import random_condition_distributions

ZONES = [40, 50, 55, 60]


def _baseline_densities():
    rng = np.random.default_rng(0)
    return {z: kde_fit(rng.normal(z + 4.0, 2.0, size=168), 1.0) for z in ZONES}


def _estimate(condition, crash_type, mean, se=0.01):
    return RiskEstimate(condition=condition, crash_type=crash_type, ev_mean=mean, ev_se=se, n_trials=1000)


def test_zone_marginal_uniform_by_default():
    marginal = zone_marginal(ZONES)
    assert marginal.probabilities == [0.25] * 4


def test_zone_marginal_renormalizes_weights():
    marginal = zone_marginal(ZONES, {40: 2.0, 50: 1.0, 55: 1.0})
    assert marginal.probabilities[0] == pytest.approx(0.5)
    assert marginal.probabilities[3] == pytest.approx(0.0, abs=1e-15)
    assert math.fsum(marginal.probabilities) == pytest.approx(1.0, abs=1e-12)


def test_zone_marginal_rejects_unknown_zone():
    with pytest.raises(InputDataError):
        zone_marginal(ZONES, {70: 1.0})


def test_identity_weights_reproduce_baseline():
    """Test that identity speed-model weights leave baseline draws unchanged."""
    baselines = _baseline_densities()
    dists = build_condition_distributions(baselines, ModelWeights.from_array([0, 1, 0, 0]), n_pred=10_000, rng=3)
    for condition in Condition.ivs_conditions():
        for zone in ZONES:
            predicted = dists[condition][zone]
            assert predicted.kernel_width == 2.0
            statistic = stats.kstest(predicted.sample_points, lambda x: density_cdf(baselines[zone], x)).statistic
            assert statistic < 0.02


def test_sign_offset_shifts_distribution():
    baselines = _baseline_densities()
    dists = build_condition_distributions(baselines, ModelWeights.from_array([0, 1, 10, 0]), n_pred=10_000, rng=4)
    for zone in ZONES:
        plus = dists[Condition.IVS_PLUS_ES][zone].sample_points
        minus = dists[Condition.IVS_MINUS_ES][zone].sample_points
        se = math.sqrt(plus.var(ddof=1) / plus.size + minus.var(ddof=1) / minus.size)
        assert abs(plus.mean() - minus.mean() - 10.0) < 3 * se


def test_condition_distributions_are_seeded():
    baselines = _baseline_densities()
    weights = ModelWeights.from_array([1.0, 1.05, -8.0, 0.0])
    a = build_condition_distributions(baselines, weights, n_pred=500, rng=12)
    b = build_condition_distributions(baselines, weights, n_pred=500, rng=12)
    assert condition_distributions_to_dict(a) == condition_distributions_to_dict(b)


def test_missing_baseline_zone():
    with pytest.raises(InputDataError):
        build_condition_distributions(_baseline_densities(), ModelWeights.from_array([0, 1, 0, 0]), zones=[40, 45])


def test_closed_form_extremes():
    speeds = DiscreteDistribution(grid=np.array([30.0, 50.0, 70.0]), masses=np.array([0.2, 0.5, 0.3]))
    certain = FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=50.0, slope_b=1e-3)
    never = FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=-50.0, slope_b=1e-3)
    assert expected_value_closed_form(speeds, certain) == -1.0
    assert expected_value_closed_form(speeds, never) == 1.0


def test_closed_form_two_atoms():
    z = stats.norm.ppf(0.8)
    b = 2 * z / 40.0
    curve = FatalityCurve(crash_type=CrashType.FRONT_IMPACT, intercept_a=-z - 30.0 * b, slope_b=b)
    speeds = DiscreteDistribution(grid=np.array([30.0, 70.0]), masses=np.array([0.5, 0.5]))
    assert expected_value_closed_form(speeds, curve) == pytest.approx(0.0, abs=1e-12)


def test_closed_form_identity(default_curves):
    d = kde_fit([45.0, 52.0, 58.0, 66.0], 2.0)
    speeds = marginal_speed_distribution(zone_marginal([55]), {Condition.BASELINE: {55: d}}, Condition.BASELINE)
    for curve in default_curves:
        expected = 1.0 - 2.0 * math.fsum((speeds.masses * fatality_probability(curve, speeds.grid)).tolist())
        assert abs(expected_value_closed_form(speeds, curve) - expected) < 1e-12


def test_degenerate_distribution_is_exact():
    dists = {Condition.BASELINE: {55: kde_fit([200.0], 1e-9)}}
    curve = FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=0.0, slope_b=1.0)
    [estimate] = monte_carlo_risk(zone_marginal([55]), dists, [curve], n_trials=500, master_seed=3)
    assert estimate.ev_mean == -1.0
    assert estimate.ev_se == 0.0


def test_trial_streams_are_independent_of_order():
    a = trial_generator(7, 12).random(3)
    trial_generator(7, 11).random(3)
    b = trial_generator(7, 12).random(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, trial_generator(7, 13).random(3))
    assert not np.array_equal(a, trial_generator(8, 12).random(3))


def test_results_independent_of_worker_count(default_curves):
    dists = random_condition_distributions(np.random.default_rng(21), ZONES)
    marginal = zone_marginal(ZONES)
    single = monte_carlo_risk(marginal, dists, default_curves, n_trials=4000, master_seed=99, workers=1)
    pooled = monte_carlo_risk(marginal, dists, default_curves, n_trials=4000, master_seed=99, workers=3)
    assert [e.model_dump() for e in single] == [e.model_dump() for e in pooled]
    assert len(single) == 9


def test_monte_carlo_matches_closed_form(default_pipeline):
    """Test that each of the nine cells agrees with the closed-form expected value on the discretized distributions."""
    config, outputs = default_pipeline
    exact = {(e.condition, e.crash_type): e.ev_mean for e in closed_form_risk(outputs.marginal, outputs.cond_dists, outputs.curves)}
    assert len(outputs.estimates) == 9
    for estimate in outputs.estimates:
        assert estimate.n_trials == config.n_trials
        assert abs(estimate.ev_mean - exact[(estimate.condition, estimate.crash_type)]) < 3 * estimate.ev_se


def test_shifting_faster_never_helps(default_curves):
    rng = np.random.default_rng(2025)
    for _ in range(20):
        zones = sorted(rng.choice([30, 40, 45, 50, 55, 60, 65], size=rng.integers(1, 5), replace=False).tolist())
        weights = {z: float(w) for z, w in zip(zones, rng.uniform(0.1, 1.0, size=len(zones)))}
        marginal = zone_marginal(zones, weights)
        dists = random_condition_distributions(rng, zones, n_samples=int(rng.integers(5, 40)))
        curves = [
            FatalityCurve(crash_type=c.crash_type, intercept_a=c.intercept_a + rng.normal(0, 0.5),
                          slope_b=c.slope_b * rng.uniform(0.5, 1.5))
            for c in default_curves
        ]
        seed = int(rng.integers(0, 2 ** 32))
        before = monte_carlo_risk(marginal, dists, curves, n_trials=400, master_seed=seed)
        after = monte_carlo_risk(marginal, shift_distributions(dists, 5.0), curves, n_trials=400, master_seed=seed)
        for b, a in zip(before, after):
            assert a.ev_mean <= b.ev_mean
        closed_before = closed_form_risk(marginal, dists, curves)
        closed_after = closed_form_risk(marginal, shift_distributions(dists, 5.0), curves)
        for b, a in zip(closed_before, closed_after):
            assert a.ev_mean <= b.ev_mean + 1e-12


def test_identical_estimates_are_comparable():
    estimates = [_estimate(c, t, -0.5) for c in Condition for t in CrashType]
    comparisons = compare_to_baseline(estimates)
    assert len(comparisons) == 6
    assert all(c.verdict == COMPARABLE for c in comparisons)


def test_two_standard_error_rule():
    estimates = [
        _estimate(Condition.BASELINE, CrashType.FRONT_IMPACT, -0.37),
        _estimate(Condition.IVS_PLUS_ES, CrashType.FRONT_IMPACT, -0.21),
        _estimate(Condition.IVS_MINUS_ES, CrashType.FRONT_IMPACT, -0.65),
    ]
    verdicts = {c.condition: c.verdict for c in compare_to_baseline(estimates)}
    assert verdicts == {Condition.IVS_PLUS_ES: SAFER, Condition.IVS_MINUS_ES: RISKIER}
    close = [
        _estimate(Condition.BASELINE, CrashType.SIDE_IMPACT, -0.92),
        _estimate(Condition.IVS_PLUS_ES, CrashType.SIDE_IMPACT, -0.90),
    ]
    assert compare_to_baseline(close)[0].verdict == COMPARABLE


def test_comparison_needs_baseline():
    with pytest.raises(InputDataError):
        compare_to_baseline([_estimate(Condition.IVS_PLUS_ES, CrashType.PEDESTRIAN, -0.9)])


def test_distributions_dict_round_trip():
    dists = random_condition_distributions(np.random.default_rng(1), [40, 50], n_samples=4)
    restored = condition_distributions_from_dict(condition_distributions_to_dict(dists))
    assert set(restored) == set(Condition)
    np.testing.assert_array_equal(restored[Condition.IVS_MINUS_ES][50].sample_points,
                                  dists[Condition.IVS_MINUS_ES][50].sample_points)
    with pytest.raises(InputDataError):
        condition_distributions_from_dict({"autopilot": {}})


def test_calibrated_risk_shape(default_pipeline):
    """Baseline cells sit near the published values and the orderings hold."""
    _, outputs = default_pipeline
    table = risk_table(outputs.estimates)
    assert table[CrashType.PEDESTRIAN][Condition.BASELINE] == pytest.approx(-0.99, abs=0.10)
    assert table[CrashType.SIDE_IMPACT][Condition.BASELINE] == pytest.approx(-0.92, abs=0.10)
    assert table[CrashType.FRONT_IMPACT][Condition.BASELINE] == pytest.approx(-0.37, abs=0.10)
    assert all(v <= -0.9 for v in table[CrashType.PEDESTRIAN].values())

    verdicts = {(c.crash_type, c.condition): c.verdict for c in outputs.comparisons}
    assert verdicts[(CrashType.FRONT_IMPACT, Condition.IVS_MINUS_ES)] == RISKIER
    assert verdicts[(CrashType.SIDE_IMPACT, Condition.IVS_MINUS_ES)] == RISKIER
    assert verdicts[(CrashType.FRONT_IMPACT, Condition.IVS_PLUS_ES)] == SAFER


def test_calibrated_fidelity_regime(default_pipeline):
    _, outputs = default_pipeline
    assert 70.0 <= outputs.compare.mean_efficiency_pct <= 95.0
    assert [r.zone_mph for r in outputs.compare.reports] == ZONES


def test_standard_error_halves_with_four_times_the_trials(default_curves):
    dists = random_condition_distributions(np.random.default_rng(8), ZONES)
    marginal = zone_marginal(ZONES)
    few = monte_carlo_risk(marginal, dists, default_curves, n_trials=4000, master_seed=12)
    many = monte_carlo_risk(marginal, dists, default_curves, n_trials=16000, master_seed=12)
    ratios = [
        a.ev_se / b.ev_se
        for a, b in zip(few, many)
        if a.crash_type is not CrashType.PEDESTRIAN and b.ev_se > 1e-3
    ]
    assert ratios
    assert all(1.6 <= r <= 2.4 for r in ratios)


def test_calibrated_ivs_plus_es_verdicts(default_pipeline):
    """IVS+ES lowers side-impact risk; the pedestrian cell stays saturated near baseline."""
    _, outputs = default_pipeline
    comparisons = {(c.crash_type, c.condition): c for c in outputs.comparisons}
    assert comparisons[(CrashType.SIDE_IMPACT, Condition.IVS_PLUS_ES)].verdict == SAFER
    assert abs(comparisons[(CrashType.PEDESTRIAN, Condition.IVS_PLUS_ES)].difference) < 0.02
