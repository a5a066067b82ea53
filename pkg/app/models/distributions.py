from dataclasses import dataclass

import numpy as np

MASS_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Density:
    """Gaussian-kernel density estimate over speeds. kernel_width is the kernel standard deviation."""
    sample_points: np.ndarray
    kernel_width: float

    def __post_init__(self):
        points = np.asarray(self.sample_points, dtype=float).ravel()
        if points.size == 0:
            raise ValueError("a density needs at least one sample point")
        if not np.all(np.isfinite(points)):
            raise ValueError("sample points must be finite")
        if not self.kernel_width > 0:
            raise ValueError(f"kernel width must be positive, got {self.kernel_width}")
        points.setflags(write=False)
        object.__setattr__(self, "sample_points", points)
        object.__setattr__(self, "kernel_width", float(self.kernel_width))

    @property
    def n(self) -> int:
        return int(self.sample_points.size)

    def mean(self) -> float:
        return float(np.mean(self.sample_points))


@dataclass(frozen=True)
class DiscreteDistribution:
    """Normalized masses on a strictly increasing speed grid."""
    grid: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).ravel()
        masses = np.asarray(self.masses, dtype=float).ravel()
        if grid.size != masses.size:
            raise ValueError(f"grid has {grid.size} points but {masses.size} masses given")
        if grid.size == 0:
            raise ValueError("empty distribution")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise ValueError("masses must be finite and nonnegative")
        grid.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "masses", masses)

    @property
    def is_normalized(self) -> bool:
        return abs(float(np.sum(self.masses)) - 1.0) <= MASS_TOLERANCE

    def same_grid(self, other: "DiscreteDistribution") -> bool:
        return self.grid.shape == other.grid.shape and bool(np.array_equal(self.grid, other.grid))

    def __len__(self) -> int:
        return int(self.grid.size)
