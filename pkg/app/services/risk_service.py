import math
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr

from app.core.errors import InputDataError
from app.core.logging import get_logger
from app.core.utils import stable_mean, standard_error
from app.models.distributions import Density, DiscreteDistribution
from app.models.risk_models import (
    BaselineComparison,
    FatalityCurve,
    ModelWeights,
    Outcome,
    RiskEstimate,
    ZoneMarginal,
)
from app.models.speed_models import CONDITION_ORDER, CRASH_TYPE_ORDER, Condition, CrashType
from app.services.density_service import (
    DEFAULT_GRID_STEP,
    density_from_dict,
    density_sample_many,
    density_to_dict,
    kde_fit,
    mixture_distribution,
    padded_grid,
    shift_density,
    summarize,
)
from app.services.model_service import predict_many

logger = get_logger("risk_service")

ConditionDistributions = Dict[Condition, Dict[int, Density]]

LOSS_FATALITY = Outcome.LOSS[Outcome.FATALITY]
LOSS_SURVIVAL = Outcome.LOSS[Outcome.SURVIVAL]

SAFER = "safer"
COMPARABLE = "comparable"
RISKIER = "riskier"
SEPARATION_SES = 2.0

# Counter layout for per-trial streams: the trial index occupies the high 64-bit word.
_TRIAL_COUNTER_SHIFT = 192


def zone_marginal(zones: Sequence[int], weights: Optional[Dict[int, float]] = None) -> ZoneMarginal:
    """
    p(s^p) over the configured zones: uniform by default, else the given weights renormalized.
    """
    zones = list(zones)
    if not zones:
        raise InputDataError("no zones configured")
    if weights is None:
        return ZoneMarginal(zones=zones, probabilities=[1.0 / len(zones)] * len(zones))
    unknown = set(weights) - set(zones)
    if unknown:
        raise InputDataError(f"weights given for unconfigured zones: {sorted(unknown)}")
    raw = [float(weights.get(z, 0.0)) for z in zones]
    if any(w < 0 for w in raw) or sum(raw) <= 0:
        raise InputDataError("zone weights must be nonnegative with a positive total")
    total = math.fsum(raw)
    probabilities = [w / total for w in raw]
    # Absorb the renormalization residue so the probabilities sum to one within the model tolerance.
    probabilities[-1] = 1.0 - math.fsum(probabilities[:-1])
    return ZoneMarginal(zones=zones, probabilities=probabilities)


def build_condition_distributions(
    baseline_densities: Dict[int, Density],
    weights: ModelWeights,
    zones: Optional[Sequence[int]] = None,
    n_pred: int = 10000,
    pred_kernel_width: float = 2.0,
    rng: Union[np.random.Generator, int, None] = None,
) -> ConditionDistributions:
    """
    Per-(condition, zone) speed densities p(s | s^p, c).

    Baseline entries are the given densities. For each IVS condition and zone, n_pred baseline
    averages are drawn, mapped through the speed model with the condition's external-sign indicator, and
    smoothed with a KDE of width pred_kernel_width.

    Args:
        baseline_densities: Baseline hourly-average density per zone
        weights: Fitted speed-model weights (pooled weights are used)
        zones: Zones to build; all zones of baseline_densities when None
        n_pred: Draws per (condition, zone)
        pred_kernel_width: KDE width for the predicted speeds (mph)
        rng: Generator or seed

    Returns:
        Densities keyed by condition, then zone
    """
    zones = sorted(baseline_densities) if zones is None else list(zones)
    missing = [z for z in zones if z not in baseline_densities]
    if missing:
        raise InputDataError(f"no baseline density for zones: {missing}")
    if n_pred <= 0:
        raise InputDataError("n_pred must be positive")
    generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    dists: ConditionDistributions = {Condition.BASELINE: {z: baseline_densities[z] for z in zones}}
    for condition in Condition.ivs_conditions():
        dists[condition] = {}
        for zone in zones:
            draws = density_sample_many(baseline_densities[zone], generator, n_pred)
            predicted = predict_many(weights, draws, condition.delta_es)
            dists[condition][zone] = kde_fit(predicted, pred_kernel_width)
            logger.debug(summarize(dists[condition][zone], f"{condition.value} zone {zone}"))
    return dists


def expected_value_closed_form(speeds: DiscreteDistribution, curve: FatalityCurve) -> float:
    """
    Expected value on a discrete speed distribution:
    sum_i m_i [L(1) (1 - p_f(s_i)) + L(0) p_f(s_i)] = 1 - 2 sum_i m_i p_f(s_i).
    """
    if not speeds.is_normalized:
        raise InputDataError("speed distribution is not normalized")
    p_fatal = ndtr(curve.intercept_a + curve.slope_b * speeds.grid)
    per_speed = LOSS_FATALITY * p_fatal + LOSS_SURVIVAL * (1.0 - p_fatal)
    return math.fsum((speeds.masses * per_speed).tolist())


def marginal_speed_distribution(
    marginal: ZoneMarginal,
    cond_dists: ConditionDistributions,
    condition: Condition,
    grid_step: float = DEFAULT_GRID_STEP,
    grid: Optional[np.ndarray] = None,
) -> DiscreteDistribution:
    """Zone-marginalized speed distribution sum_z p(z) p(s | z, c) on a padded grid."""
    densities = [_lookup(cond_dists, condition, z) for z in marginal.zones]
    if grid is None:
        low = min(float(d.sample_points.min()) for d in densities)
        high = max(float(d.sample_points.max()) for d in densities)
        width = max(d.kernel_width for d in densities)
        grid = padded_grid(low, high, width, grid_step)
    return mixture_distribution(densities, marginal.probabilities, grid)


def closed_form_risk(
    marginal: ZoneMarginal,
    cond_dists: ConditionDistributions,
    curves: Sequence[FatalityCurve],
    grid_step: float = DEFAULT_GRID_STEP,
) -> List[RiskEstimate]:
    """Expected value evaluated on the discretized, zone-marginalized distributions (ev_se = 0)."""
    estimates = []
    for condition in _conditions_present(cond_dists):
        speeds = marginal_speed_distribution(marginal, cond_dists, condition, grid_step)
        for curve in _ordered_curves(curves):
            ev = min(1.0, max(-1.0, expected_value_closed_form(speeds, curve)))
            estimates.append(
                RiskEstimate(condition=condition, crash_type=curve.crash_type, ev_mean=ev, ev_se=0.0, n_trials=0)
            )
    return estimates


def _lookup(cond_dists: ConditionDistributions, condition: Condition, zone: int) -> Density:
    try:
        return cond_dists[condition][zone]
    except KeyError:
        raise InputDataError(f"no speed distribution for {condition.value} in zone {zone}")


def _conditions_present(cond_dists: ConditionDistributions) -> List[Condition]:
    return [c for c in CONDITION_ORDER if c in cond_dists]


def _ordered_curves(curves: Sequence[FatalityCurve]) -> List[FatalityCurve]:
    by_type = {c.crash_type: c for c in curves}
    return [by_type[t] for t in CRASH_TYPE_ORDER if t in by_type]


def trial_generator(master_seed: int, trial: int) -> np.random.Generator:
    """Counter-based stream for one trial; depends only on (master_seed, trial)."""
    return np.random.Generator(np.random.Philox(key=master_seed, counter=trial << _TRIAL_COUNTER_SHIFT))


def _trial_draws(master_seed: int, start: int, stop: int, n_conditions: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniforms (zone draw + one per condition) and kernel normals for trials [start, stop)."""
    count = stop - start
    uniforms = np.empty((count, 1 + n_conditions))
    normals = np.empty((count, n_conditions))
    for row, trial in enumerate(range(start, stop)):
        rng = trial_generator(master_seed, trial)
        uniforms[row] = rng.random(1 + n_conditions)
        normals[row] = rng.standard_normal(n_conditions)
    return uniforms, normals


def _simulate_chunk(
    master_seed: int,
    start: int,
    stop: int,
    cumulative: np.ndarray,
    zones: List[int],
    conditions: List[Condition],
    cond_dists: ConditionDistributions,
    curves: List[FatalityCurve],
) -> np.ndarray:
    """
    Per-trial expected values for trials [start, stop).

    Returns an array of shape (trials, conditions, crash types).
    """
    uniforms, normals = _trial_draws(master_seed, start, stop, len(conditions))
    zone_index = np.minimum(np.searchsorted(cumulative, uniforms[:, 0], side="right"), len(zones) - 1)
    ev = np.empty((stop - start, len(conditions), len(curves)))
    for ci, condition in enumerate(conditions):
        speeds = np.empty(stop - start)
        for zi, zone in enumerate(zones):
            mask = zone_index == zi
            if not np.any(mask):
                continue
            d = cond_dists[condition][zone]
            picks = np.minimum((uniforms[mask, 1 + ci] * d.n).astype(np.int64), d.n - 1)
            speeds[mask] = d.sample_points[picks] + d.kernel_width * normals[mask, ci]
        for ti, curve in enumerate(curves):
            p_fatal = ndtr(curve.intercept_a + curve.slope_b * speeds)
            ev[:, ci, ti] = p_fatal * LOSS_FATALITY + (1.0 - p_fatal) * LOSS_SURVIVAL
    return ev


def _chunks(n_trials: int, workers: int) -> List[Tuple[int, int]]:
    n_chunks = max(1, min(n_trials, workers * 4))
    edges = np.linspace(0, n_trials, n_chunks + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def monte_carlo_risk(
    marginal: ZoneMarginal,
    cond_dists: ConditionDistributions,
    curves: Sequence[FatalityCurve],
    n_trials: int,
    master_seed: int,
    workers: int = 1,
) -> List[RiskEstimate]:
    """
    Monte-Carlo estimate of E(V_c^t(o)) for every (condition, crash type).

    Each trial draws a zone from p(s^p), then one speed per condition from p(s | s^p, c), and
    scores every crash type with the exact outcome expectation p_f L(0) + (1 - p_f) L(1).
    Trial n uses only the stream trial_generator(master_seed, n), and means and standard errors
    are formed with exact summation, so results do not depend on the worker count.

    Args:
        marginal: Zone marginal p(s^p)
        cond_dists: Speed densities per condition and zone
        curves: Fatality curves
        n_trials: Number of trials N (>= 1)
        master_seed: Master seed
        workers: Worker processes; 1 runs in-process

    Returns:
        RiskEstimates in condition order, then crash-type order
    """
    if n_trials < 1:
        raise InputDataError("n_trials must be at least 1")
    curves = _ordered_curves(curves)
    if not curves:
        raise InputDataError("no fatality curves given")
    conditions = _conditions_present(cond_dists)
    if not conditions:
        raise InputDataError("no condition distributions given")
    zones = list(marginal.zones)
    for condition in conditions:
        for zone in zones:
            _lookup(cond_dists, condition, zone)
    cumulative = np.cumsum(marginal.probabilities)

    chunks = _chunks(n_trials, workers)
    args = (cumulative, zones, conditions, cond_dists, curves)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_chunk, master_seed, a, b, *args) for a, b in chunks]
            parts = [f.result() for f in futures]
    else:
        parts = [_simulate_chunk(master_seed, a, b, *args) for a, b in chunks]
    per_trial = np.concatenate(parts, axis=0)

    estimates = []
    for ci, condition in enumerate(conditions):
        for ti, curve in enumerate(curves):
            values = per_trial[:, ci, ti]
            mean = min(1.0, max(-1.0, stable_mean(values)))
            estimates.append(
                RiskEstimate(
                    condition=condition,
                    crash_type=curve.crash_type,
                    ev_mean=mean,
                    ev_se=standard_error(values),
                    n_trials=n_trials,
                )
            )
    logger.info(f"Simulated {n_trials} trials over {len(zones)} zones with {workers} worker(s)")
    return estimates


def compare_to_baseline(estimates: Sequence[RiskEstimate], separation: float = SEPARATION_SES) -> List[BaselineComparison]:
    """
    Label each IVS condition safer, comparable or riskier than baseline per crash type.

    A condition differs from baseline when its mean is more than `separation` combined
    standard errors away; higher EV is safer.
    """
    cells = {(e.condition, e.crash_type): e for e in estimates}
    crash_types = [t for t in CRASH_TYPE_ORDER if any(e.crash_type is t for e in estimates)]
    comparisons = []
    for crash_type in crash_types:
        baseline = cells.get((Condition.BASELINE, crash_type))
        if baseline is None:
            raise InputDataError(f"no baseline estimate for {crash_type.value}")
        for condition in Condition.ivs_conditions():
            estimate = cells.get((condition, crash_type))
            if estimate is None:
                continue
            difference = estimate.ev_mean - baseline.ev_mean
            combined_se = math.sqrt(estimate.ev_se ** 2 + baseline.ev_se ** 2)
            if difference > separation * combined_se:
                verdict = SAFER
            elif difference < -separation * combined_se:
                verdict = RISKIER
            else:
                verdict = COMPARABLE
            comparisons.append(
                BaselineComparison(
                    crash_type=crash_type,
                    condition=condition,
                    baseline_ev=baseline.ev_mean,
                    condition_ev=estimate.ev_mean,
                    difference=difference,
                    combined_se=combined_se,
                    verdict=verdict,
                )
            )
    return comparisons


def shift_distributions(cond_dists: ConditionDistributions, mph: float,
                        conditions: Optional[Sequence[Condition]] = None) -> ConditionDistributions:
    """Shift every sample point of the chosen conditions (all by default) by `mph`."""
    chosen = set(conditions) if conditions is not None else set(cond_dists)
    return {
        c: {z: shift_density(d, mph) if c in chosen else d for z, d in zones.items()}
        for c, zones in cond_dists.items()
    }


def condition_distributions_to_dict(cond_dists: ConditionDistributions) -> Dict:
    return {
        c.value: {str(z): density_to_dict(d) for z, d in sorted(zones.items())}
        for c, zones in cond_dists.items()
    }


def condition_distributions_from_dict(data: Dict) -> ConditionDistributions:
    try:
        return {
            Condition(c): {int(z): density_from_dict(d) for z, d in zones.items()}
            for c, zones in data.items()
        }
    except ValueError as e:
        raise InputDataError(f"invalid condition distributions: {e}") from e


def risk_table(estimates: Sequence[RiskEstimate]) -> Dict[CrashType, Dict[Condition, float]]:
    table: Dict[CrashType, Dict[Condition, float]] = {}
    for e in estimates:
        table.setdefault(e.crash_type, {})[e.condition] = e.ev_mean
    return table
