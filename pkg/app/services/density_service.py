from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from app.core.errors import InputDataError, NumericalError
from app.core.logging import get_logger
from app.models.distributions import Density, DiscreteDistribution

logger = get_logger("density_service")

SQRT_2PI = np.sqrt(2.0 * np.pi)
GRID_PADDING_WIDTHS = 8.0
DEFAULT_GRID_STEP = 0.5
DEFAULT_MASS_FLOOR = 1e-12

# Evaluation works in blocks of grid points to bound memory for large sample sets.
_BLOCK_ELEMENTS = 2_000_000


def kde_fit(samples: Sequence[float], kernel_width: float) -> Density:
    """
    Fit a Gaussian kernel density estimate.

    Args:
        samples: Observed speeds (mph)
        kernel_width: Kernel standard deviation (mph)

    Returns:
        The fitted Density
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise InputDataError("cannot fit a density to an empty sample set")
    if not np.all(np.isfinite(samples)):
        raise InputDataError("density samples must be finite")
    if not kernel_width > 0:
        raise InputDataError(f"kernel width must be positive, got {kernel_width}")
    return Density(sample_points=samples, kernel_width=kernel_width)


def _evaluate_many(d: Density, x: np.ndarray) -> np.ndarray:
    h = d.kernel_width
    out = np.empty(x.size)
    block = max(1, _BLOCK_ELEMENTS // d.n)
    for start in range(0, x.size, block):
        chunk = x[start:start + block]
        z = (chunk[:, None] - d.sample_points[None, :]) / h
        out[start:start + block] = np.mean(np.exp(-0.5 * z * z), axis=1) / (SQRT_2PI * h)
    return out


def density_evaluate(d: Density, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Probability density (per mph) at x; vectorized over arrays."""
    arr = np.asarray(x, dtype=float)
    values = _evaluate_many(d, arr.ravel()).reshape(arr.shape)
    if arr.ndim == 0:
        return float(values)
    return values


def density_cdf(d: Density, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Cumulative distribution of the KDE: the mean of the kernel CDFs."""
    arr = np.asarray(x, dtype=float)
    flat = arr.ravel()
    out = np.empty(flat.size)
    block = max(1, _BLOCK_ELEMENTS // d.n)
    for start in range(0, flat.size, block):
        chunk = flat[start:start + block]
        out[start:start + block] = np.mean(ndtr((chunk[:, None] - d.sample_points[None, :]) / d.kernel_width), axis=1)
    out = out.reshape(arr.shape)
    if arr.ndim == 0:
        return float(out)
    return out


def density_sample(d: Density, rng: np.random.Generator) -> float:
    """
    One exact draw from the KDE: a sample point chosen uniformly, plus kernel noise.
    """
    index = rng.integers(d.n)
    return float(d.sample_points[index] + d.kernel_width * rng.standard_normal())


def density_sample_many(d: Density, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized exact KDE sampling."""
    indices = rng.integers(d.n, size=size)
    return d.sample_points[indices] + d.kernel_width * rng.standard_normal(size)


def discretize(d: Density, grid: Sequence[float]) -> DiscreteDistribution:
    """
    Masses proportional to the density at the grid points, renormalized to one.

    Args:
        d: Density to discretize
        grid: Strictly increasing speeds, at least two

    Returns:
        The DiscreteDistribution on the grid
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size < 2:
        raise InputDataError("a discretization grid needs at least two points")
    if not np.all(np.diff(grid) > 0):
        raise InputDataError("discretization grid must be strictly increasing")
    values = _evaluate_many(d, grid)
    total = values.sum()
    if not total > 0:
        raise NumericalError("density vanishes on the whole grid")
    return DiscreteDistribution(grid=grid, masses=values / total)


def fidelity_grid(
    samples_a: Sequence[float],
    samples_b: Sequence[float],
    kernel_width: float,
    step: float = DEFAULT_GRID_STEP,
) -> np.ndarray:
    """Uniform grid over the union of both sample sets, padded by 8 kernel widths."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    both = np.concatenate([a, b])
    if both.size == 0:
        raise InputDataError("cannot build a grid without samples")
    return padded_grid(float(both.min()), float(both.max()), kernel_width, step)


def padded_grid(low: float, high: float, kernel_width: float, step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    start = low - GRID_PADDING_WIDTHS * kernel_width
    stop = high + GRID_PADDING_WIDTHS * kernel_width
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(max(count, 2))


def floor_masses(dist: DiscreteDistribution, floor: float = DEFAULT_MASS_FLOOR) -> DiscreteDistribution:
    """Floor every mass at `floor`, then renormalize."""
    masses = np.maximum(dist.masses, floor)
    return DiscreteDistribution(grid=dist.grid, masses=masses / masses.sum())


def mixture_distribution(
    densities: Sequence[Density],
    weights: Sequence[float],
    grid: Sequence[float],
) -> DiscreteDistribution:
    """Weighted mixture of discretized densities on one grid."""
    if len(densities) != len(weights) or not densities:
        raise InputDataError("one weight per density is required")
    grid = np.asarray(grid, dtype=float)
    masses = np.zeros(grid.size)
    for d, w in zip(densities, weights):
        if w > 0:
            masses += w * discretize(d, grid).masses
    total = masses.sum()
    if not total > 0:
        raise NumericalError("mixture has no mass on the grid")
    return DiscreteDistribution(grid=grid, masses=masses / total)


def density_to_dict(d: Density) -> Dict:
    return {"samples": d.sample_points.tolist(), "width": d.kernel_width}


def density_from_dict(data: Dict) -> Density:
    try:
        return kde_fit(data["samples"], data["width"])
    except KeyError as e:
        raise InputDataError(f"density JSON lacks field {e}") from e


def shift_density(d: Density, mph: float) -> Density:
    return Density(sample_points=d.sample_points + mph, kernel_width=d.kernel_width)


def summarize(d: Density, label: Optional[str] = None) -> str:
    points = d.sample_points
    prefix = f"{label}: " if label else ""
    return f"{prefix}n={d.n} mean={points.mean():.2f} sd={points.std():.2f} width={d.kernel_width:g}"
