import numpy as np
import pytest
from scipy.special import ndtr

from app.core.errors import InputDataError, NumericalError
from app.models.risk_models import FatalityCurve
from app.models.speed_models import CrashType, CurvePoint
from app.services.fatality_service import (
    fatality_probability,
    fit_all_curves,
    probit_fit,
    probit_log_likelihood,
    probit_score,
    standard_normal_cdf,
    survival_probability,
)


def _binomial_points(a, b, speeds, n_obs, seed=0):
    rng = np.random.default_rng(seed)
    return [
        CurvePoint(speed_mph=s, fatality_fraction=rng.binomial(n_obs, ndtr(a + b * s)) / n_obs, n_obs=n_obs)
        for s in speeds
    ]


def test_standard_normal_cdf():
    assert standard_normal_cdf(0.0) == 0.5
    assert standard_normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)


def test_recovers_generating_curve():
    points = _binomial_points(-10.0, 0.25, range(10, 90, 10), 10_000)
    curve = probit_fit(points, CrashType.PEDESTRIAN)
    assert curve.intercept_a == pytest.approx(-10.0, rel=0.05)
    assert curve.slope_b == pytest.approx(0.25, rel=0.05)


def test_gradient_vanishes_at_optimum():
    """Finite-difference and analytic gradients of the per-observation log-likelihood are ~0 at the fit."""
    points = _binomial_points(-10.0, 0.25, range(10, 90, 10), 10_000)
    curve = probit_fit(points)
    total = sum(p.n_obs for p in points)
    a, b, eps = curve.intercept_a, curve.slope_b, 1e-6

    def mean_ll(a_, b_):
        return probit_log_likelihood(a_, b_, points) / total

    grad_a = (mean_ll(a + eps, b) - mean_ll(a - eps, b)) / (2 * eps)
    grad_b = (mean_ll(a, b + eps) - mean_ll(a, b - eps)) / (2 * eps)
    assert abs(grad_a) < 1e-5
    assert abs(grad_b) < 1e-5
    assert np.all(np.abs(probit_score(a, b, points) / total) < 1e-5)


def test_two_point_exact_inversion():
    points = [
        CurvePoint(speed_mph=20.0, fatality_fraction=float(ndtr(-1.0))),
        CurvePoint(speed_mph=40.0, fatality_fraction=float(ndtr(1.0))),
    ]
    curve = probit_fit(points)
    assert curve.intercept_a == pytest.approx(-3.0, abs=1e-4)
    assert curve.slope_b == pytest.approx(0.1, abs=1e-4)


def test_flat_fractions_have_no_slope():
    points = [CurvePoint(speed_mph=s, fatality_fraction=0.5, n_obs=100) for s in (20.0, 40.0, 60.0)]
    with pytest.raises(NumericalError):
        probit_fit(points)


def test_decreasing_fractions_rejected():
    points = [CurvePoint(speed_mph=s, fatality_fraction=f, n_obs=100) for s, f in ((20.0, 0.8), (40.0, 0.5), (60.0, 0.2))]
    with pytest.raises(NumericalError):
        probit_fit(points)


def test_all_fatal_rejected():
    points = [CurvePoint(speed_mph=s, fatality_fraction=1.0) for s in (20.0, 40.0)]
    with pytest.raises(NumericalError):
        probit_fit(points)


def test_needs_distinct_speeds():
    points = [CurvePoint(speed_mph=30.0, fatality_fraction=f) for f in (0.2, 0.4)]
    with pytest.raises(InputDataError):
        probit_fit(points)


def test_fit_all_curves_in_fixed_order(default_dataset):
    curves = fit_all_curves(default_dataset.fatality_points)
    assert [c.crash_type for c in curves] == [CrashType.PEDESTRIAN, CrashType.SIDE_IMPACT, CrashType.FRONT_IMPACT]
    assert all(c.slope_b > 0 for c in curves)


def test_fit_all_curves_needs_every_type(default_dataset):
    points = dict(default_dataset.fatality_points)
    del points[CrashType.SIDE_IMPACT]
    with pytest.raises(InputDataError, match="side_impact"):
        fit_all_curves(points)


def test_probability_midpoint_and_limits():
    curve = FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=-7.0, slope_b=0.25)
    assert fatality_probability(curve, 28.0) == pytest.approx(0.5)
    assert survival_probability(curve, 28.0) == pytest.approx(0.5)
    assert fatality_probability(curve, 120.0) == pytest.approx(1.0)
    speeds = np.array([10.0, 30.0, 50.0])
    np.testing.assert_allclose(fatality_probability(curve, speeds) + survival_probability(curve, speeds), 1.0)


def test_large_intercept_means_no_survival():
    curve = FatalityCurve(crash_type=CrashType.FRONT_IMPACT, intercept_a=40.0, slope_b=0.01)
    assert np.all(survival_probability(curve, np.arange(10.0, 90.0)) < 1e-12)


def test_curve_requires_positive_slope():
    with pytest.raises(ValueError):
        FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=-3.0, slope_b=0.0)


def test_curve_json_keys():
    curve = FatalityCurve(crash_type=CrashType.SIDE_IMPACT, intercept_a=-4.2, slope_b=0.12)
    data = curve.to_json_dict()
    assert data["a"] == -4.2 and data["b"] == 0.12
    assert FatalityCurve.from_json_dict(data) == curve


def test_fit_unchanged_by_duplicated_points():
    points = _binomial_points(-6.0, 0.15, range(15, 85, 10), 400, seed=3)
    once = probit_fit(points, CrashType.SIDE_IMPACT)
    twice = probit_fit(points + points, CrashType.SIDE_IMPACT)
    assert twice.intercept_a == pytest.approx(once.intercept_a, abs=1e-9)
    assert twice.slope_b == pytest.approx(once.slope_b, abs=1e-9)
    assert twice.log_likelihood == pytest.approx(2.0 * once.log_likelihood, rel=1e-12)


def test_optimum_beats_perturbed_parameters():
    points = _binomial_points(-8.0, 0.2, range(10, 90, 5), 200, seed=4)
    curve = probit_fit(points)
    best = probit_log_likelihood(curve.intercept_a, curve.slope_b, points)
    rng = np.random.default_rng(9)
    for da, db in zip(rng.normal(0.0, 0.5, 64), rng.normal(0.0, 0.01, 64)):
        assert probit_log_likelihood(curve.intercept_a + da, curve.slope_b + db, points) <= best


def test_standard_normal_cdf_is_symmetric():
    x = np.random.default_rng(2).normal(0.0, 3.0, 1000)
    np.testing.assert_allclose(standard_normal_cdf(x) + standard_normal_cdf(-x), 1.0, atol=1e-15)


def test_fatality_probability_is_monotone():
    curve = FatalityCurve(crash_type=CrashType.FRONT_IMPACT, intercept_a=-5.3, slope_b=0.09)
    rng = np.random.default_rng(13)
    pairs = np.sort(rng.uniform(0.0, 120.0, size=(1000, 2)), axis=1)
    assert np.all(fatality_probability(curve, pairs[:, 0]) <= fatality_probability(curve, pairs[:, 1]))
