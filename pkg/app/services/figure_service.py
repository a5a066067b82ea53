from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from app.core.config import RunConfig
from app.core.errors import InputDataError
from app.core.logging import get_logger
from app.core.utils import ensure_dir
from app.models.speed_models import CONDITION_ORDER, CRASH_TYPE_ORDER, Condition
from app.services.density_service import density_evaluate, fidelity_grid, kde_fit, padded_grid
from app.services.fatality_service import fatality_probability
from app.services.model_service import predict
from app.services.risk_service import marginal_speed_distribution

if TYPE_CHECKING:
    from app.services.pipeline_service import PipelineOutputs

logger = get_logger("figure_service")

# Speed axes for the model and probit figures (mph).
MODEL_AXIS = np.arange(40.0, 65.0 + 0.25, 0.5)
PROBIT_AXIS = np.arange(0.0, 100.0 + 0.5, 1.0)


def _write(df: pd.DataFrame, path: Path) -> Path:
    try:
        df.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise InputDataError(f"cannot write figure data {path}: {e}") from e
    return path


def fidelity_density_frames(outputs: "PipelineOutputs", config: RunConfig) -> Dict[int, pd.DataFrame]:
    """Reference and approximation KDE curves per compared zone, on the comparison grid."""
    frames = {}
    compare = outputs.compare
    for zone in sorted(compare.reference_speeds):
        ref_samples, approx_samples = compare.reference_speeds[zone], compare.approx_speeds[zone]
        ref = kde_fit(ref_samples, config.fidelity_kernel_width)
        approx = kde_fit(approx_samples, config.fidelity_kernel_width)
        grid = fidelity_grid(ref_samples, approx_samples, config.fidelity_kernel_width, config.grid_step)
        frames[zone] = pd.DataFrame({
            "speed_mph": grid,
            "highfi_density": density_evaluate(ref, grid),
            "lowfi_density": density_evaluate(approx, grid),
        })
    return frames


def percent_posted_frame(outputs: "PipelineOutputs") -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"condition": s.condition.value, "mean_pct": s.mean_pct, "se_pct": s.se_pct,
             "n_participants": s.n_participants}
            for s in outputs.percent_summary
        ],
        columns=["condition", "mean_pct", "se_pct", "n_participants"],
    )


def model_training_frame(outputs: "PipelineOutputs") -> pd.DataFrame:
    """Speed-model predictions with the across-fold band over the baseline axis."""
    rows = []
    for condition in Condition.ivs_conditions():
        for speed in MODEL_AXIS:
            p = predict(outputs.weights, float(speed), condition.delta_es)
            rows.append({
                "condition": condition.value,
                "baseline_speed_mph": float(speed),
                "predicted_mph": p.speed_mph,
                "fold_mean_mph": p.fold_mean_mph,
                "fold_se_mph": p.fold_se_mph,
            })
    return pd.DataFrame(rows)


def model_cv_frame(outputs: "PipelineOutputs") -> pd.DataFrame:
    rows = [
        {
            "fold": p.fold,
            "condition": (Condition.IVS_PLUS_ES if p.delta_es == 1 else Condition.IVS_MINUS_ES).value,
            "baseline_speed_mph": p.baseline_speed,
            "actual_mph": p.actual_mph,
            "predicted_mph": p.predicted_mph,
        }
        for p in outputs.cv.predictions
    ]
    return pd.DataFrame(rows, columns=["fold", "condition", "baseline_speed_mph", "actual_mph", "predicted_mph"])


def sampling_distributions_frame(outputs: "PipelineOutputs", config: RunConfig) -> pd.DataFrame:
    """Zone-marginalized speed densities per condition on one shared grid."""
    dists = outputs.cond_dists
    conditions = [c for c in CONDITION_ORDER if c in dists]
    densities = [dists[c][z] for c in conditions for z in outputs.marginal.zones]
    low = min(float(d.sample_points.min()) for d in densities)
    high = max(float(d.sample_points.max()) for d in densities)
    grid = padded_grid(low, high, max(d.kernel_width for d in densities), config.grid_step)
    frame = {"speed_mph": grid}
    for condition in conditions:
        speeds = marginal_speed_distribution(outputs.marginal, dists, condition, grid=grid)
        frame[condition.value] = speeds.masses / config.grid_step
    return pd.DataFrame(frame)


def sampling_distribution_zone_frames(outputs: "PipelineOutputs", config: RunConfig) -> Dict[int, pd.DataFrame]:
    """Per-zone speed densities per condition, the view the risk simulation draws from."""
    dists = outputs.cond_dists
    conditions = [c for c in CONDITION_ORDER if c in dists]
    frames = {}
    for zone in outputs.marginal.zones:
        densities = [dists[c][zone] for c in conditions]
        low = min(float(d.sample_points.min()) for d in densities)
        high = max(float(d.sample_points.max()) for d in densities)
        grid = padded_grid(low, high, max(d.kernel_width for d in densities), config.grid_step)
        frame = {"speed_mph": grid}
        for condition, density in zip(conditions, densities):
            frame[condition.value] = density_evaluate(density, grid)
        frames[zone] = pd.DataFrame(frame)
    return frames


def probit_curves_frame(outputs: "PipelineOutputs") -> pd.DataFrame:
    frame = {"speed_mph": PROBIT_AXIS}
    by_type = {c.crash_type: c for c in outputs.curves}
    for crash_type in CRASH_TYPE_ORDER:
        if crash_type in by_type:
            frame[crash_type.value] = fatality_probability(by_type[crash_type], PROBIT_AXIS)
    return pd.DataFrame(frame)


def risk_bars_frame(outputs: "PipelineOutputs") -> pd.DataFrame:
    verdicts = {(c.condition, c.crash_type): c.verdict for c in outputs.comparisons}
    baseline = {e.crash_type: e.ev_mean for e in outputs.estimates if e.condition is Condition.BASELINE}
    rows = [
        {
            "condition": e.condition.value,
            "crash_type": e.crash_type.value,
            "ev_mean": e.ev_mean,
            "ev_se": e.ev_se,
            "n_trials": e.n_trials,
            "baseline_ev": baseline.get(e.crash_type),
            "verdict": verdicts.get((e.condition, e.crash_type), ""),
        }
        for e in outputs.estimates
    ]
    return pd.DataFrame(
        rows, columns=["condition", "crash_type", "ev_mean", "ev_se", "n_trials", "baseline_ev", "verdict"]
    )


def emit_figure_data(
    outputs: "PipelineOutputs",
    out_dir: Union[str, Path],
    config: Optional[RunConfig] = None,
) -> List[Path]:
    """
    Write one CSV per figure for every stage output present.

    Returns:
        Paths written, in a fixed order
    """
    config = config or RunConfig()
    out_dir = ensure_dir(out_dir)
    written = []
    if outputs.compare is not None and outputs.compare.reference_speeds:
        for zone, df in fidelity_density_frames(outputs, config).items():
            written.append(_write(df, out_dir / f"fidelity_density_zone_{zone}.csv"))
    if outputs.percent_summary:
        written.append(_write(percent_posted_frame(outputs), out_dir / "percent_posted_speed.csv"))
    if outputs.weights is not None:
        written.append(_write(model_training_frame(outputs), out_dir / "model_training.csv"))
    if outputs.cv is not None:
        written.append(_write(model_cv_frame(outputs), out_dir / "model_cv_scatter.csv"))
    if outputs.cond_dists is not None and outputs.marginal is not None:
        written.append(_write(sampling_distributions_frame(outputs, config), out_dir / "sampling_distributions.csv"))
        for zone, df in sampling_distribution_zone_frames(outputs, config).items():
            written.append(_write(df, out_dir / f"sampling_distributions_zone_{zone}.csv"))
    if outputs.curves:
        written.append(_write(probit_curves_frame(outputs), out_dir / "probit_curves.csv"))
    if outputs.estimates:
        written.append(_write(risk_bars_frame(outputs), out_dir / "risk_bars.csv"))
    logger.info(f"Wrote {len(written)} figure data files to {out_dir}")
    return written
