import os

# Keep test runs from writing log files into the working tree.
os.environ.setdefault("LOG_TO_FILE", "False")

import numpy as np
import pytest

from app.core.config import CalibrationConfig, RunConfig
from app.models.risk_models import FatalityCurve
from app.models.speed_models import Condition, CrashType
from app.services.data_service import generate_synthetic_dataset
from app.services.density_service import kde_fit
from app.services.pipeline_service import run_full_pipeline


@pytest.fixture(scope="session")
def default_dataset():
    """The bundled calibrated synthetic dataset (default calibration, seed 7)."""
    return generate_synthetic_dataset(CalibrationConfig(), seed=7)


@pytest.fixture(scope="session")
def default_pipeline(tmp_path_factory):
    """Full pipeline with default settings on a freshly generated synthetic dataset."""
    out_dir = tmp_path_factory.mktemp("default_pipeline")
    config = RunConfig(out_dir=str(out_dir))
    return config, run_full_pipeline(config)


@pytest.fixture
def small_config(tmp_path):
    """A quick configuration: smaller dataset, fewer draws and trials."""
    return RunConfig(
        out_dir=str(tmp_path / "out"),
        n_pred=1500,
        n_trials=3000,
        seed=11,
        calibration=CalibrationConfig(participants_per_group=10, hours_per_zone=24),
    )


@pytest.fixture
def default_curves():
    return [
        FatalityCurve(crash_type=CrashType.PEDESTRIAN, intercept_a=-7.0, slope_b=0.25),
        FatalityCurve(crash_type=CrashType.SIDE_IMPACT, intercept_a=-4.2, slope_b=0.12),
        FatalityCurve(crash_type=CrashType.FRONT_IMPACT, intercept_a=-3.88, slope_b=0.08),
    ]


def random_condition_distributions(rng: np.random.Generator, zones, n_samples: int = 50):
    """Random per-(condition, zone) densities around plausible road speeds."""
    dists = {}
    for condition in Condition:
        dists[condition] = {}
        for zone in zones:
            center = zone * rng.uniform(0.9, 1.25)
            samples = rng.normal(center, rng.uniform(1.0, 6.0), size=n_samples)
            dists[condition][zone] = kde_fit(np.abs(samples) + 1.0, rng.uniform(0.5, 3.0))
    return dists
