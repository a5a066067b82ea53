from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.speed_models import Condition, CrashType

WeightQuad = Tuple[float, float, float, float]


class FidelityReport(BaseModel):
    """Information-theoretic comparison of a low-fidelity approximation Q to a high-fidelity reference P."""
    zone_mph: Optional[int] = Field(None, description="Posted speed zone")
    entropy_bits: float = Field(..., description="H(P)")
    kl_bits: float = Field(..., description="K(P||Q)")
    info_overhead_pct: float = Field(..., description="I(Q) = 100 * K / H")
    efficiency_pct: float = Field(..., description="E(Q) = 100 - I(Q); may be negative")
    n_reference: Optional[int] = Field(None, description="Reference sample count")
    n_approximation: Optional[int] = Field(None, description="Approximation sample count")


class TrainingRow(BaseModel):
    """One observation for the speed model."""
    model_config = ConfigDict(frozen=True)

    baseline_speed: float = Field(..., description="Zone-average baseline speed s_z^b")
    delta_es: int = Field(..., description="External-sign indicator")
    target_speed: float = Field(..., description="Observed condition speed s_z^c")

    @field_validator("baseline_speed")
    @classmethod
    def _baseline_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("baseline speed must be positive")
        return v

    @field_validator("delta_es")
    @classmethod
    def _indicator(cls, v: int) -> int:
        if v not in (0, 1):
            raise ValueError("delta_es must be 0 or 1")
        return v


class HeldOutPrediction(BaseModel):
    fold: int
    baseline_speed: float
    delta_es: int
    predicted_mph: float
    actual_mph: float

    @property
    def residual(self) -> float:
        return self.predicted_mph - self.actual_mph


class ModelWeights(BaseModel):
    """Speed-model coefficients: pooled fit plus optional per-fold fits."""
    w0: float = Field(..., description="Intercept (mph)")
    w1: float = Field(..., description="Baseline slope")
    w2: float = Field(..., description="External-sign offset (mph)")
    w3: float = Field(..., description="Curvature (per mph)")
    fold_weights: List[WeightQuad] = Field(default_factory=list)
    k: Optional[int] = None
    seed: Optional[int] = None
    cv_median_abs_error_mph: Optional[float] = None

    @model_validator(mode="after")
    def _finite(self) -> "ModelWeights":
        values = [self.w0, self.w1, self.w2, self.w3] + [w for quad in self.fold_weights for w in quad]
        if not np.all(np.isfinite(values)):
            raise ValueError("model weights must be finite")
        if self.k is not None and self.fold_weights and len(self.fold_weights) != self.k:
            raise ValueError(f"expected {self.k} fold weight sets, got {len(self.fold_weights)}")
        return self

    @property
    def pooled(self) -> np.ndarray:
        return np.array([self.w0, self.w1, self.w2, self.w3])

    @classmethod
    def from_array(cls, w, **kwargs) -> "ModelWeights":
        w = [float(x) for x in w]
        return cls(w0=w[0], w1=w[1], w2=w[2], w3=w[3], **kwargs)

    def to_json_dict(self) -> Dict:
        """The documented weights file layout."""
        return {
            "pooled": self.pooled.tolist(),
            "folds": [list(q) for q in self.fold_weights],
            "k": self.k,
            "seed": self.seed,
            "cv_median_abs_error_mph": self.cv_median_abs_error_mph,
        }

    @classmethod
    def from_json_dict(cls, data: Dict) -> "ModelWeights":
        return cls.from_array(
            data["pooled"],
            fold_weights=[tuple(q) for q in data.get("folds", [])],
            k=data.get("k"),
            seed=data.get("seed"),
            cv_median_abs_error_mph=data.get("cv_median_abs_error_mph"),
        )


class SpeedPrediction(BaseModel):
    """Speed-model prediction with the across-fold band when fold weights exist."""
    speed_mph: float = Field(..., description="Pooled-weight prediction")
    fold_mean_mph: Optional[float] = None
    fold_se_mph: Optional[float] = None


class CrossValidationResult(BaseModel):
    fold_weights: List[WeightQuad]
    folds: List[List[int]] = Field(..., description="Held-out row indices per fold")
    predictions: List[HeldOutPrediction]
    seed: Optional[int] = None


class FatalityCurve(BaseModel):
    """Probit fatality curve p(o=0 | a_t, s) = Phi(a + b s)."""
    crash_type: CrashType
    intercept_a: float
    slope_b: float
    log_likelihood: Optional[float] = None
    converged_iterations: Optional[int] = None

    @field_validator("slope_b")
    @classmethod
    def _increasing(cls, v: float) -> float:
        if not v > 0:
            raise ValueError(f"fatality curve slope must be positive, got {v}")
        return v

    def to_json_dict(self) -> Dict:
        return {
            "crash_type": self.crash_type.value,
            "a": self.intercept_a,
            "b": self.slope_b,
            "log_likelihood": self.log_likelihood,
            "converged_iterations": self.converged_iterations,
        }

    @classmethod
    def from_json_dict(cls, data: Dict) -> "FatalityCurve":
        return cls(
            crash_type=data["crash_type"],
            intercept_a=data["a"],
            slope_b=data["b"],
            log_likelihood=data.get("log_likelihood"),
            converged_iterations=data.get("converged_iterations"),
        )


class ZoneMarginal(BaseModel):
    """Marginal probability of posted speeds p(s^p)."""
    zones: List[int]
    probabilities: List[float]

    @model_validator(mode="after")
    def _normalized(self) -> "ZoneMarginal":
        if not self.zones:
            raise ValueError("zone marginal needs at least one zone")
        if len(self.zones) != len(self.probabilities):
            raise ValueError("one probability per zone is required")
        if len(set(self.zones)) != len(self.zones):
            raise ValueError("duplicate zones in marginal")
        if any(p < 0 for p in self.probabilities):
            raise ValueError("zone probabilities must be nonnegative")
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError("zone probabilities must sum to 1")
        return self


class Outcome:
    """Crash outcomes o and the unit loss function L(o)."""
    FATALITY = 0
    SURVIVAL = 1
    LOSS = {FATALITY: -1.0, SURVIVAL: 1.0}


class RiskEstimate(BaseModel):
    condition: Condition
    crash_type: CrashType
    ev_mean: float = Field(..., description="Expected value in [-1, 1]")
    ev_se: float = Field(..., description="Standard error of the mean")
    n_trials: int

    @model_validator(mode="after")
    def _bounds(self) -> "RiskEstimate":
        if not -1.0 <= self.ev_mean <= 1.0:
            raise ValueError(f"expected value {self.ev_mean} outside [-1, 1]")
        if self.ev_se < 0:
            raise ValueError("standard error must be nonnegative")
        return self


class BaselineComparison(BaseModel):
    """Verdict for one IVS condition against baseline for one crash type."""
    crash_type: CrashType
    condition: Condition
    baseline_ev: float
    condition_ev: float
    difference: float
    combined_se: float
    verdict: str = Field(..., description="safer, comparable or riskier")
