import json
import os
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from app.core.errors import ConfigurationError

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Process-level settings."""
    PROJECT_NAME: str = "IVS Risk Engine"

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIR: str = os.getenv("LOG_DIR", "logs")
    LOG_TO_FILE: bool = os.getenv("LOG_TO_FILE", "True").lower() == "true"

    # Run defaults
    DEFAULT_CONFIG_PATH: Optional[str] = os.getenv("IVS_RISK_CONFIG", None)
    DEFAULT_WORKERS: int = int(os.getenv("IVS_RISK_WORKERS", 1))
    DEFAULT_SEED: int = int(os.getenv("IVS_RISK_SEED", 7))

    class Config:
        case_sensitive = True


# Create global settings object
settings = Settings()


class ZoneCalibration(BaseModel):
    """High-fidelity generating parameters for one posted speed zone."""
    zone_mph: int = Field(..., description="Posted speed of the zone")
    highfi_mean_mph: float = Field(..., description="Mean free-flow vehicle speed")
    highfi_spread_mph: float = Field(5.0, description="Standard deviation of vehicle speeds within an hour")

    @field_validator("zone_mph")
    @classmethod
    def _zone_positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("zone_mph must be positive")
        return v

    @field_validator("highfi_mean_mph", "highfi_spread_mph")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v


class CurveCalibration(BaseModel):
    """Generating probit parameters for one crash type."""
    crash_type: str
    intercept_a: float
    slope_b: float


def _default_zone_calibration() -> List[ZoneCalibration]:
    # Reference spread per zone stays below the simulator spread for that zone.
    return [
        ZoneCalibration(zone_mph=40, highfi_mean_mph=46.0, highfi_spread_mph=1.73),
        ZoneCalibration(zone_mph=50, highfi_mean_mph=56.0, highfi_spread_mph=2.29),
        ZoneCalibration(zone_mph=55, highfi_mean_mph=57.0, highfi_spread_mph=2.83),
        ZoneCalibration(zone_mph=60, highfi_mean_mph=62.0, highfi_spread_mph=3.35),
    ]


def _default_curves() -> List[CurveCalibration]:
    return [
        CurveCalibration(crash_type="pedestrian", intercept_a=-7.0, slope_b=0.25),
        CurveCalibration(crash_type="side_impact", intercept_a=-4.2, slope_b=0.12),
        CurveCalibration(crash_type="front_impact", intercept_a=-3.88, slope_b=0.08),
    ]


class CalibrationConfig(BaseModel):
    """Targets for the synthetic dataset generator."""
    zones: List[ZoneCalibration] = Field(
        default_factory=_default_zone_calibration,
        description="High-fidelity zones with per-zone mean and spread",
    )
    lowfi_zones: List[int] = Field(
        default_factory=lambda: [30, 40, 45, 50, 55, 60, 65],
        description="Posted speeds driven in the simulator",
    )
    condition_targets_pct: Dict[str, float] = Field(
        default_factory=lambda: {"baseline": 106.8, "ivs_plus_es": 103.0, "ivs_minus_es": 123.9},
        description="Median percent posted speed per condition",
    )
    lowfi_spread_pct: float = Field(6.0, description="Per-record spread in percent of posted speed")
    participant_spread_pct: float = Field(2.0, description="Spread of participant offsets in percent of posted speed")
    participants_per_group: int = Field(40, description="Participants in each technology group")
    passes_per_zone: int = Field(3, description="Records per participant, zone and IVS state")
    hours_per_zone: int = Field(168, description="Hours of high-fidelity counts per zone")
    vehicles_per_hour: int = Field(40, description="Vehicles counted per hour")
    hourly_spread_mph: float = Field(1.0, description="Spread of hour-to-hour mean speed")
    fatality_curves: List[CurveCalibration] = Field(default_factory=_default_curves)
    fatality_speeds_mph: List[float] = Field(
        default_factory=lambda: [float(s) for s in range(10, 95, 5)],
        description="Speeds at which fatality fractions are observed",
    )
    fatality_n_obs: int = Field(400, description="Crashes observed per fatality point")

    @field_validator("lowfi_spread_pct", "participant_spread_pct", "hourly_spread_mph")
    @classmethod
    def _spread_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("spreads must be positive")
        return v

    @field_validator("participants_per_group", "passes_per_zone", "hours_per_zone",
                     "vehicles_per_hour", "fatality_n_obs")
    @classmethod
    def _count_positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("counts must be positive")
        return v

    @model_validator(mode="after")
    def _check_lists(self) -> "CalibrationConfig":
        if not self.zones:
            raise ValueError("zone list is empty")
        if not self.lowfi_zones:
            raise ValueError("low-fidelity zone list is empty")
        missing = {"baseline", "ivs_plus_es", "ivs_minus_es"} - set(self.condition_targets_pct)
        if missing:
            raise ValueError(f"missing condition targets: {sorted(missing)}")
        return self


class RunConfig(BaseModel):
    """Configuration for one engine run. Defaults reenact the published pipeline."""
    zones: List[int] = Field(default_factory=lambda: [40, 50, 55, 60], description="Configured high-fidelity zones")
    zone_weights: Optional[Dict[int, float]] = Field(None, description="Marginal p(s^p); uniform when absent")
    fidelity_kernel_width: float = Field(1.0, description="KDE width for fidelity comparison (mph)")
    baseline_kernel_width: float = Field(1.0, description="KDE width for baseline hourly-average densities (mph)")
    prediction_kernel_width: float = Field(2.0, description="KDE width for predicted condition speeds (mph)")
    bin_width: float = Field(5.0, description="High-fidelity bin width (mph)")
    grid_step: float = Field(0.5, description="Grid step for discretized distributions (mph)")
    kl_floor: float = Field(1e-12, description="Mass floor applied to Q before KL")
    k_folds: int = Field(10, description="Cross-validation folds")
    n_pred: int = Field(10000, description="Baseline draws per (condition, zone)")
    n_trials: int = Field(100000, description="Monte-Carlo trials")
    seed: int = Field(settings.DEFAULT_SEED, description="Master seed")
    workers: int = Field(settings.DEFAULT_WORKERS, description="Worker processes for the risk stage")
    lowfi_path: Optional[str] = Field(None, description="Low-fidelity CSV")
    highfi_path: Optional[str] = Field(None, description="High-fidelity binned counts CSV")
    fatality_path: Optional[str] = Field(None, description="Fatality points CSV")
    out_dir: str = Field("results", description="Output directory")
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)

    @field_validator("fidelity_kernel_width", "baseline_kernel_width", "prediction_kernel_width",
                     "bin_width", "grid_step", "kl_floor")
    @classmethod
    def _width_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("widths and steps must be positive")
        return v

    @field_validator("k_folds")
    @classmethod
    def _folds(cls, v: int) -> int:
        if v < 2:
            raise ValueError("k_folds must be at least 2")
        return v

    @field_validator("n_pred", "n_trials", "workers")
    @classmethod
    def _count_positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("counts must be positive")
        return v

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v: int) -> int:
        if v < 0 or v >= 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return v

    @model_validator(mode="after")
    def _check_zones(self) -> "RunConfig":
        if not self.zones:
            raise ValueError("zone list is empty")
        if self.zone_weights is not None:
            unknown = set(self.zone_weights) - set(self.zones)
            if unknown:
                raise ValueError(f"zone weights for unconfigured zones: {sorted(unknown)}")
        return self

    def with_overrides(self, **overrides) -> "RunConfig":
        """Return a copy with every non-None override applied (flags win over the file)."""
        updates = {k: v for k, v in overrides.items() if v is not None}
        try:
            return RunConfig.model_validate({**self.model_dump(), **updates})
        except ValidationError as e:
            raise ConfigurationError(f"invalid override: {e}") from e

    def path_in_out(self, filename: str) -> Path:
        return Path(self.out_dir) / filename


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """
    Load a run configuration from a JSON file.

    Args:
        path: JSON file; when None, settings.DEFAULT_CONFIG_PATH or built-in defaults are used

    Returns:
        The validated RunConfig
    """
    path = path or settings.DEFAULT_CONFIG_PATH
    if not path:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}") from e
