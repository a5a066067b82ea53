import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import entr, rel_entr

from app.core.errors import InputDataError, NumericalError
from app.core.logging import get_logger
from app.core.utils import stable_mean
from app.models.distributions import DiscreteDistribution
from app.models.risk_models import FidelityReport
from app.services.density_service import (
    DEFAULT_GRID_STEP,
    DEFAULT_MASS_FLOOR,
    discretize,
    fidelity_grid,
    floor_masses,
    kde_fit,
)

logger = get_logger("infotheory")

LN2 = math.log(2.0)


def _require_normalized(dist: DiscreteDistribution, name: str) -> None:
    if not dist.is_normalized:
        raise InputDataError(f"{name} is not normalized (sum of masses {float(np.sum(dist.masses)):.12g})")


def shannon_entropy(p: DiscreteDistribution) -> float:
    """H(P) in bits, with 0 log 0 taken as 0."""
    _require_normalized(p, "P")
    return max(0.0, float(np.sum(entr(p.masses))) / LN2)


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """
    K(P||Q) = sum_i p_i log2(p_i / q_i) in bits.

    Infinite when Q has zero mass where P has mass; floor Q first to avoid that.
    """
    if not p.same_grid(q):
        raise InputDataError("P and Q are defined on different grids")
    _require_normalized(p, "P")
    _require_normalized(q, "Q")
    return max(0.0, float(np.sum(rel_entr(p.masses, q.masses))) / LN2)


def cross_entropy(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Bits needed on average to describe P with a code built for Q: H(P) + K(P||Q)."""
    return shannon_entropy(p) + kl_divergence(p, q)


def approximation_efficiency(
    p: DiscreteDistribution,
    q: DiscreteDistribution,
    zone_mph: Optional[int] = None,
) -> FidelityReport:
    """
    Approximation efficiency of Q for the reference P.

    I(Q) = 100 K(P||Q) / H(P) and E(Q) = 100 - I(Q). E(Q) is not clamped and may be negative.

    Args:
        p: Reference (high-fidelity) distribution
        q: Approximating (low-fidelity) distribution on the same grid
        zone_mph: Zone tag for the report

    Returns:
        The FidelityReport
    """
    entropy = shannon_entropy(p)
    if entropy <= 0:
        raise NumericalError("reference distribution has zero entropy; efficiency is undefined")
    kl = kl_divergence(p, q)
    overhead = 100.0 * kl / entropy
    return FidelityReport(
        zone_mph=zone_mph,
        entropy_bits=entropy,
        kl_bits=kl,
        info_overhead_pct=overhead,
        efficiency_pct=100.0 - overhead,
    )


def compare_zone(
    zone_mph: Optional[int],
    reference_samples: Sequence[float],
    approx_samples: Sequence[float],
    kernel_width: float = 1.0,
    grid_step: float = DEFAULT_GRID_STEP,
    floor: float = DEFAULT_MASS_FLOOR,
) -> FidelityReport:
    """
    Fidelity report for one zone from raw speed samples.

    Both samples are smoothed with the same kernel width and discretized on a shared grid;
    Q is floored before the divergence is taken.
    """
    grid = fidelity_grid(reference_samples, approx_samples, kernel_width, grid_step)
    p = discretize(kde_fit(reference_samples, kernel_width), grid)
    q = floor_masses(discretize(kde_fit(approx_samples, kernel_width), grid), floor)
    report = approximation_efficiency(p, q, zone_mph=zone_mph)
    report = report.model_copy(update={
        "n_reference": len(reference_samples),
        "n_approximation": len(approx_samples),
    })
    logger.info(
        f"Zone {zone_mph}: H(P)={report.entropy_bits:.3f} bits, K(P||Q)={report.kl_bits:.3f} bits, "
        f"E(Q)={report.efficiency_pct:.1f}%"
    )
    return report


def mean_efficiency(reports: Sequence[FidelityReport]) -> float:
    if not reports:
        raise InputDataError("no fidelity reports to average")
    return stable_mean([r.efficiency_pct for r in reports])
