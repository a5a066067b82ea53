import numpy as np
import pytest

from app.core.config import CalibrationConfig, RunConfig
from app.core.errors import InputDataError, NumericalError
from app.models.distributions import DiscreteDistribution
from app.models.risk_models import FidelityReport
from app.services.data_service import baseline_speeds_by_zone, expand_bin_centers, generate_synthetic_dataset
from app.services.infotheory import (
    approximation_efficiency,
    compare_zone,
    cross_entropy,
    kl_divergence,
    mean_efficiency,
    shannon_entropy,
)


def _dist(masses, grid=None):
    masses = np.asarray(masses, dtype=float)
    grid = np.arange(masses.size, dtype=float) if grid is None else grid
    return DiscreteDistribution(grid=grid, masses=masses)


def test_entropy_two_point_uniform():
    assert abs(shannon_entropy(_dist([0.5, 0.5])) - 1.0) < 1e-9


def test_entropy_deterministic():
    assert shannon_entropy(_dist([1.0])) == 0.0


def test_entropy_skewed_pair():
    assert shannon_entropy(_dist([0.25, 0.75])) == pytest.approx(0.811278, abs=1e-6)


def test_entropy_ignores_zero_mass():
    assert shannon_entropy(_dist([0.5, 0.0, 0.5])) == pytest.approx(1.0, abs=1e-12)


def test_kl_of_identical_distributions():
    p = _dist([0.1, 0.2, 0.3, 0.4])
    assert abs(kl_divergence(p, p)) < 1e-9


def test_kl_known_value():
    assert kl_divergence(_dist([0.5, 0.5]), _dist([0.25, 0.75])) == pytest.approx(0.207519, abs=1e-6)


def test_kl_is_asymmetric_and_nonnegative():
    p, q = _dist([0.7, 0.2, 0.1]), _dist([0.2, 0.3, 0.5])
    assert kl_divergence(p, q) > 0
    assert kl_divergence(q, p) > 0
    assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p))


def test_kl_infinite_without_floor():
    assert kl_divergence(_dist([0.5, 0.5]), _dist([1.0, 0.0])) == float("inf")


def test_kl_requires_shared_grid():
    with pytest.raises(InputDataError, match="different grids"):
        kl_divergence(_dist([0.5, 0.5]), _dist([0.5, 0.5], grid=np.array([1.0, 2.0])))


def test_unnormalized_input_rejected():
    with pytest.raises(InputDataError, match="not normalized"):
        shannon_entropy(_dist([0.5, 0.6]))


def test_cross_entropy_decomposes():
    p, q = _dist([0.5, 0.5]), _dist([0.25, 0.75])
    assert cross_entropy(p, q) == pytest.approx(1.0 + 0.207519, abs=1e-6)


def test_efficiency_arithmetic():
    """Test that I(Q) = 100 K / H and E(Q) = 100 - I(Q)."""
    p = _dist([0.25, 0.25, 0.25, 0.25])
    q = _dist([0.1, 0.2, 0.3, 0.4])
    report = approximation_efficiency(p, q, zone_mph=55)
    assert report.entropy_bits == pytest.approx(2.0)
    assert report.info_overhead_pct == pytest.approx(100.0 * report.kl_bits / 2.0)
    assert report.efficiency_pct == pytest.approx(100.0 - report.info_overhead_pct)
    assert report.zone_mph == 55


def test_efficiency_of_exact_copy():
    p = _dist([0.2, 0.3, 0.5])
    assert approximation_efficiency(p, p).efficiency_pct == pytest.approx(100.0)


def test_efficiency_needs_entropy():
    with pytest.raises(NumericalError):
        approximation_efficiency(_dist([1.0, 0.0]), _dist([0.5, 0.5]))


def test_efficiency_can_go_negative():
    p = _dist([0.5, 0.5, 0.0])
    q = _dist([1e-9, 1e-9, 1.0 - 2e-9])
    assert approximation_efficiency(p, q).efficiency_pct < 0


def test_efficiency_never_exceeds_100():
    rng = np.random.default_rng(4)
    for _ in range(50):
        p = _dist(rng.dirichlet(np.ones(12)))
        q = _dist(rng.dirichlet(np.ones(12)))
        assert approximation_efficiency(p, q).efficiency_pct <= 100.0


def test_compare_zone_identical_samples():
    samples = [48.0, 50.5, 52.0, 55.5, 57.0]
    report = compare_zone(55, samples, samples, kernel_width=1.0)
    assert report.efficiency_pct == pytest.approx(100.0, abs=1e-6)
    assert report.n_reference == report.n_approximation == 5


def test_compare_zone_penalizes_offset():
    rng = np.random.default_rng(8)
    reference = rng.normal(55, 4, size=400)
    close = compare_zone(55, reference, rng.normal(55.5, 4, size=400))
    far = compare_zone(55, reference, rng.normal(62, 4, size=400))
    assert far.efficiency_pct < close.efficiency_pct < 100.0


def test_mean_efficiency():
    reports = [
        FidelityReport(entropy_bits=1, kl_bits=0, info_overhead_pct=0, efficiency_pct=e) for e in (80.0, 90.0)
    ]
    assert mean_efficiency(reports) == pytest.approx(85.0)
    with pytest.raises(InputDataError):
        mean_efficiency([])


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(17)
    for _ in range(10_000):
        size = int(rng.integers(2, 12))
        p = _dist(rng.dirichlet(np.full(size, 0.5)))
        q = _dist(rng.dirichlet(np.ones(size)))
        assert kl_divergence(p, q) >= 0.0


@pytest.mark.parametrize("size", [2, 7, 64, 501])
def test_entropy_bounded_by_grid_size(size):
    rng = np.random.default_rng(size)
    for alpha in (0.1, 1.0, 100.0):
        p = _dist(rng.dirichlet(np.full(size, alpha)))
        assert shannon_entropy(p) <= np.log2(size) + 1e-12
    assert shannon_entropy(_dist(np.full(size, 1.0 / size))) == pytest.approx(np.log2(size))


@pytest.mark.parametrize("seed", range(1, 9))
def test_calibrated_efficiency_is_stable_across_seeds(seed):
    """Synthetic data lands in the calibrated fidelity regime whatever the seed."""
    config = RunConfig()
    dataset = generate_synthetic_dataset(CalibrationConfig(), seed)
    approx = baseline_speeds_by_zone(dataset.lowfi_records)
    reference = expand_bin_centers(dataset.highfi_bins, config.bin_width)
    reports = [
        compare_zone(zone, reference[zone], approx[zone], config.fidelity_kernel_width, config.grid_step, config.kl_floor)
        for zone in config.zones
    ]
    assert 70.0 <= mean_efficiency(reports) <= 95.0
    assert all(r.efficiency_pct > 40.0 for r in reports)
