from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator


class Fidelity(str, Enum):
    LOW = "low"
    HIGH = "high"


class TechGroup(str, Enum):
    """Between-subjects technology group of a participant."""
    IVS_PLUS_ES = "ivs_plus_es"
    IVS_MINUS_ES = "ivs_minus_es"
    NONE = "none"


class Condition(str, Enum):
    """Technology condition c = technology group x IVS presence."""
    BASELINE = "baseline"
    IVS_PLUS_ES = "ivs_plus_es"
    IVS_MINUS_ES = "ivs_minus_es"

    @property
    def delta_es(self) -> int:
        """External-sign indicator of an IVS condition (1 = signs present)."""
        if self is Condition.IVS_PLUS_ES:
            return 1
        if self is Condition.IVS_MINUS_ES:
            return 0
        raise ValueError("the external-sign indicator is defined only for IVS conditions")

    @classmethod
    def ivs_conditions(cls):
        return (cls.IVS_PLUS_ES, cls.IVS_MINUS_ES)


CONDITION_ORDER = (Condition.BASELINE, Condition.IVS_PLUS_ES, Condition.IVS_MINUS_ES)


class CrashType(str, Enum):
    PEDESTRIAN = "pedestrian"
    SIDE_IMPACT = "side_impact"
    FRONT_IMPACT = "front_impact"


CRASH_TYPE_ORDER = (CrashType.PEDESTRIAN, CrashType.SIDE_IMPACT, CrashType.FRONT_IMPACT)


class SpeedRecord(BaseModel):
    """One observed vehicle speed."""
    model_config = ConfigDict(frozen=True)

    participant_id: str = Field(..., description="Opaque participant token")
    fidelity: Fidelity = Field(..., description="Data source fidelity")
    tech_group: TechGroup = Field(..., description="Technology group")
    ivs_present: bool = Field(..., description="Whether in-vehicle signage was shown")
    zone_mph: int = Field(..., description="Posted speed s^p")
    speed_mph: float = Field(..., description="Observed speed s")

    @field_validator("participant_id")
    @classmethod
    def _participant_nonempty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("participant_id is empty")
        return v

    @field_validator("speed_mph")
    @classmethod
    def _speed_positive(cls, v: float) -> float:
        if not v > 0 or v != v or v == float("inf"):
            raise ValueError(f"speed must be a positive finite number, got {v}")
        return v

    @field_validator("zone_mph")
    @classmethod
    def _zone_configured(cls, v: int, info: ValidationInfo) -> int:
        if v <= 0:
            raise ValueError(f"zone must be positive, got {v}")
        zones = (info.context or {}).get("zones")
        if zones is not None and v not in zones:
            raise ValueError(f"unknown zone {v} mph")
        return v

    @model_validator(mode="after")
    def _high_fidelity_has_no_ivs(self) -> "SpeedRecord":
        if self.fidelity is Fidelity.HIGH and (self.tech_group is not TechGroup.NONE or self.ivs_present):
            raise ValueError("high-fidelity records must have tech_group=none and ivs_present=0")
        if self.ivs_present and self.tech_group is TechGroup.NONE:
            raise ValueError("IVS-present records need a technology group")
        return self

    @property
    def condition(self) -> Condition:
        if not self.ivs_present:
            return Condition.BASELINE
        return Condition(self.tech_group.value)


class BinnedZoneCount(BaseModel):
    """Vehicle count in one speed bin for one zone and hour."""
    model_config = ConfigDict(frozen=True)

    zone_mph: int = Field(..., description="Posted speed")
    hour_index: int = Field(..., description="Hour of observation")
    bin_lower_mph: float = Field(..., description="Lower edge of the speed bin")
    count: int = Field(..., description="Vehicles observed in the bin")

    @field_validator("hour_index", "count")
    @classmethod
    def _nonnegative(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"must be nonnegative, got {v}")
        return v

    @field_validator("zone_mph")
    @classmethod
    def _zone_configured(cls, v: int, info: ValidationInfo) -> int:
        zones = (info.context or {}).get("zones")
        if zones is not None and v not in zones:
            raise ValueError(f"unknown zone {v} mph")
        return v

    @field_validator("bin_lower_mph")
    @classmethod
    def _on_bin_edge(cls, v: float, info: ValidationInfo) -> float:
        width = (info.context or {}).get("bin_width", 5.0)
        ratio = v / width
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"bin edge {v} is not a multiple of the bin width {width}")
        return v


class CurvePoint(BaseModel):
    """Observed fatality fraction at one impact speed."""
    model_config = ConfigDict(frozen=True)

    speed_mph: float
    fatality_fraction: float = Field(..., description="Fraction of crashes that were fatal")
    n_obs: float = Field(1.0, description="Observation weight")

    @field_validator("fatality_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"fatality fraction {v} outside [0, 1]")
        return v

    @field_validator("n_obs")
    @classmethod
    def _weight(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"n_obs must be positive, got {v}")
        return v


class PercentPostedSummary(BaseModel):
    """Median percent posted speed for one condition, averaged across participants."""
    condition: Condition
    mean_pct: float = Field(..., description="Mean of participant medians")
    se_pct: float = Field(..., description="Standard error across participants")
    n_participants: int
    zone_mph: Optional[int] = Field(None, description="Zone, when the summary is per zone")
