from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from app.core.errors import InputDataError, NumericalError
from app.core.logging import get_logger
from app.models.risk_models import FatalityCurve
from app.models.speed_models import CRASH_TYPE_ORDER, CrashType, CurvePoint

logger = get_logger("fatality_service")

STEP_TOLERANCE = 1e-10
MAX_ITERATIONS = 200
MAX_STEP_HALVINGS = 60
MIN_SLOPE = 1e-9
# Beyond this slope (probit units per mph) the curve is a step: the data are separated.
MAX_SLOPE = 1e3

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def standard_normal_cdf(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Phi(x), the standard normal CDF."""
    value = ndtr(x)
    return float(value) if np.ndim(value) == 0 else value


def _prepare(points: Sequence[CurvePoint]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    speeds = np.array([p.speed_mph for p in points], dtype=float)
    n = np.array([p.n_obs for p in points], dtype=float)
    fractions = np.array([p.fatality_fraction for p in points], dtype=float)
    # Continuity correction for fractions of exactly 0 or 1.
    low = 1.0 / (2.0 * n)
    fractions = np.where(fractions <= 0.0, low, fractions)
    fractions = np.where(fractions >= 1.0, 1.0 - low, fractions)
    return speeds, n, fractions


def _mills_ratios(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """phi(z)/Phi(z) and phi(z)/Phi(-z), computed in log space."""
    log_phi = -0.5 * z * z - LOG_SQRT_2PI
    return np.exp(log_phi - log_ndtr(z)), np.exp(log_phi - log_ndtr(-z))


def _log_likelihood(theta: np.ndarray, speeds: np.ndarray, n: np.ndarray, fractions: np.ndarray) -> float:
    z = theta[0] + theta[1] * speeds
    return float(np.sum(n * (fractions * log_ndtr(z) + (1.0 - fractions) * log_ndtr(-z))))


def _score_and_information(theta: np.ndarray, speeds: np.ndarray, n: np.ndarray,
                           fractions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = theta[0] + theta[1] * speeds
    lam1, lam0 = _mills_ratios(z)
    g = n * (fractions * lam1 - (1.0 - fractions) * lam0)
    x = np.column_stack([np.ones_like(speeds), speeds])
    score = x.T @ g
    # Expected information: n phi^2 / (Phi (1 - Phi)) = n lam1 lam0.
    w = n * lam1 * lam0
    information = x.T @ (x * w[:, None])
    return score, information


def probit_log_likelihood(a: float, b: float, points: Sequence[CurvePoint]) -> float:
    """Weighted binomial probit log-likelihood (after continuity correction)."""
    return _log_likelihood(np.array([a, b]), *_prepare(points))


def probit_score(a: float, b: float, points: Sequence[CurvePoint]) -> np.ndarray:
    """Gradient of probit_log_likelihood with respect to (a, b)."""
    score, _ = _score_and_information(np.array([a, b]), *_prepare(points))
    return score


def _initial_guess(speeds: np.ndarray, n: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    # Weighted least squares on the probit-transformed fractions.
    z = ndtri(fractions)
    x = np.column_stack([np.ones_like(speeds), speeds])
    w = np.sqrt(n)
    theta, *_ = np.linalg.lstsq(x * w[:, None], z * w, rcond=None)
    return theta


def probit_fit(points: Sequence[CurvePoint], crash_type: Union[CrashType, str] = CrashType.PEDESTRIAN) -> FatalityCurve:
    """
    Maximum-likelihood probit curve p(s) = Phi(a + b s).

    Damped Newton (Fisher scoring with step halving) from a probit-transform least-squares start,
    stopping when the parameter step falls below 1e-10 or after 200 iterations.

    Args:
        points: At least two points with distinct speeds, fractions not all 0 or all 1
        crash_type: Crash type recorded on the curve

    Returns:
        The fitted FatalityCurve
    """
    crash_type = CrashType(crash_type)
    if len(points) < 2:
        raise InputDataError(f"{crash_type.value}: need at least two points, got {len(points)}")
    if len({p.speed_mph for p in points}) < 2:
        raise InputDataError(f"{crash_type.value}: points need at least two distinct speeds")
    raw = [p.fatality_fraction for p in points]
    if all(f == 0.0 for f in raw) or all(f == 1.0 for f in raw):
        raise NumericalError(f"{crash_type.value}: fatality fractions are all 0 or all 1")

    speeds, n, fractions = _prepare(points)
    theta = _initial_guess(speeds, n, fractions)
    loglik = _log_likelihood(theta, speeds, n, fractions)

    converged = False
    iteration = 0
    for iteration in range(1, MAX_ITERATIONS + 1):
        score, information = _score_and_information(theta, speeds, n, fractions)
        try:
            step = np.linalg.solve(information, score)
        except np.linalg.LinAlgError:
            raise NumericalError(f"{crash_type.value}: singular information matrix at iteration {iteration}")
        scale = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            candidate = theta + scale * step
            candidate_loglik = _log_likelihood(candidate, speeds, n, fractions)
            if np.isfinite(candidate_loglik) and candidate_loglik >= loglik - 1e-12 * abs(loglik):
                break
            scale *= 0.5
        else:
            break
        delta = candidate - theta
        theta, loglik = candidate, candidate_loglik
        if abs(theta[1]) > MAX_SLOPE:
            raise NumericalError(f"{crash_type.value}: data are separated; the slope diverges")
        if np.max(np.abs(delta)) < STEP_TOLERANCE:
            converged = True
            break

    if not converged:
        score, _ = _score_and_information(theta, speeds, n, fractions)
        if np.max(np.abs(score)) > 1e-6 * max(1.0, float(np.sum(n))):
            raise NumericalError(
                f"{crash_type.value}: probit fit did not converge in {MAX_ITERATIONS} iterations"
            )
    if not theta[1] > MIN_SLOPE:
        raise NumericalError(
            f"{crash_type.value}: fitted slope {theta[1]:.3g} is not positive; fatality must increase with speed"
        )
    logger.info(f"Probit {crash_type.value}: a={theta[0]:.5f}, b={theta[1]:.5f} after {iteration} iterations")
    return FatalityCurve(
        crash_type=crash_type,
        intercept_a=float(theta[0]),
        slope_b=float(theta[1]),
        log_likelihood=loglik,
        converged_iterations=iteration,
    )


def fit_all_curves(points_by_type: Dict[CrashType, List[CurvePoint]]) -> List[FatalityCurve]:
    """Fit one curve per crash type, in the fixed crash-type order."""
    missing = [t.value for t in CRASH_TYPE_ORDER if t not in points_by_type]
    if missing:
        raise InputDataError(f"no fatality points for crash types: {', '.join(missing)}")
    return [probit_fit(points_by_type[t], t) for t in CRASH_TYPE_ORDER]


def fatality_probability(curve: FatalityCurve, speed: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """p(o = 0 | a_t, s) = Phi(a + b s)."""
    return standard_normal_cdf(curve.intercept_a + curve.slope_b * np.asarray(speed, dtype=float))


def survival_probability(curve: FatalityCurve, speed: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """p(o = 1 | a_t, s) = 1 - p(o = 0 | a_t, s)."""
    return 1.0 - fatality_probability(curve, speed)
