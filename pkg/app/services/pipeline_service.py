from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, TypeVar

import numpy as np
import pandas as pd

from app.core.config import RunConfig
from app.core.errors import InputDataError, RiskEngineError, StageError
from app.core.logging import get_logger, stage_logging
from app.core.utils import ensure_dir, read_json, write_json
from app.models.distributions import Density
from app.models.risk_models import (
    BaselineComparison,
    CrossValidationResult,
    FatalityCurve,
    FidelityReport,
    HeldOutPrediction,
    ModelWeights,
    RiskEstimate,
    ZoneMarginal,
)
from app.models.speed_models import CrashType, CurvePoint, PercentPostedSummary
from app.services import data_service
from app.services.density_service import kde_fit
from app.services.fatality_service import fit_all_curves
from app.services.figure_service import emit_figure_data
from app.services.infotheory import compare_zone, mean_efficiency
from app.services.model_service import fit_with_cv
from app.services.risk_service import (
    ConditionDistributions,
    build_condition_distributions,
    compare_to_baseline,
    condition_distributions_from_dict,
    condition_distributions_to_dict,
    monte_carlo_risk,
    zone_marginal,
)

logger = get_logger("pipeline_service")

LOWFI_FILE = "lowfi.csv"
HIGHFI_FILE = "highfi.csv"
FATALITY_FILE = "fatality_points.csv"
FIDELITY_FILE = "fidelity_report"
WEIGHTS_FILE = "model_weights.json"
CV_FILE = "cv_predictions.csv"
CURVES_FILE = "fatality_curves.json"
DISTS_FILE = "condition_distributions.json"
RESULTS_FILE = "risk_results"
COMPARISON_FILE = "risk_comparison"

# Independent seed streams per stochastic stage.
_CV_STREAM = 1
_BUILD_STREAM = 2

T = TypeVar("T")


@dataclass
class CompareResult:
    reports: List[FidelityReport]
    mean_efficiency_pct: float
    reference_speeds: Dict[int, np.ndarray] = field(default_factory=dict)
    approx_speeds: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class PipelineOutputs:
    """Stage outputs consumed by the figure-data writer; any field may be absent."""
    compare: Optional[CompareResult] = None
    percent_summary: List[PercentPostedSummary] = field(default_factory=list)
    weights: Optional[ModelWeights] = None
    cv: Optional[CrossValidationResult] = None
    curves: List[FatalityCurve] = field(default_factory=list)
    fatality_points: Dict[CrashType, List[CurvePoint]] = field(default_factory=dict)
    cond_dists: Optional[ConditionDistributions] = None
    marginal: Optional[ZoneMarginal] = None
    estimates: List[RiskEstimate] = field(default_factory=list)
    comparisons: List[BaselineComparison] = field(default_factory=list)
    written: List[Path] = field(default_factory=list)


def _stage_seed(config: RunConfig, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, stream])


def _require_path(path: Optional[str], what: str) -> str:
    if not path:
        raise InputDataError(f"no {what} path configured")
    if not Path(path).is_file():
        raise InputDataError(f"{what} file not found: {path}")
    return path


def _write_table(out_dir: Path, stem: str, rows: List[Dict], fmt: str, extra: Optional[Dict] = None) -> Path:
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")
        return path
    payload = rows if extra is None else {**extra, "rows": rows}
    return write_json(out_dir / f"{stem}.json", payload)


def run_generate(config: RunConfig) -> Tuple[RunConfig, data_service.SyntheticDataset]:
    """Write a calibrated synthetic dataset into the output directory and point the config at it."""
    out_dir = ensure_dir(config.out_dir)
    dataset = data_service.generate_synthetic_dataset(
        config.calibration, config.seed, config.bin_width, zones=config.zones
    )
    files = {
        LOWFI_FILE: data_service.serialize_lowfi_records(dataset.lowfi_records),
        HIGHFI_FILE: data_service.serialize_highfi_bins(dataset.highfi_bins),
        FATALITY_FILE: data_service.serialize_fatality_points(dataset.fatality_points),
    }
    for name, text in files.items():
        with open(out_dir / name, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    updated = config.with_overrides(
        lowfi_path=str(out_dir / LOWFI_FILE),
        highfi_path=str(out_dir / HIGHFI_FILE),
        fatality_path=str(out_dir / FATALITY_FILE),
    )
    return updated, dataset


def run_compare(config: RunConfig, fmt: str = "json") -> CompareResult:
    """
    Fidelity comparison per overlapping zone: P from the reference (high-fidelity) file,
    Q from low-fidelity baseline records.
    """
    lowfi_path = _require_path(config.lowfi_path, "low-fidelity")
    highfi_path = _require_path(config.highfi_path, "high-fidelity")
    approx = data_service.baseline_speeds_by_zone(data_service.load_lowfi_records(lowfi_path))
    reference = data_service.load_reference_speeds(highfi_path, zones=config.zones, bin_width=config.bin_width)
    overlap = sorted(set(approx) & set(reference))
    if not overlap:
        raise InputDataError(
            f"no overlapping zones between low-fidelity {sorted(approx)} and high-fidelity {sorted(reference)} data"
        )
    reports = [
        compare_zone(
            zone,
            reference[zone],
            approx[zone],
            kernel_width=config.fidelity_kernel_width,
            grid_step=config.grid_step,
            floor=config.kl_floor,
        )
        for zone in overlap
    ]
    result = CompareResult(
        reports=reports,
        mean_efficiency_pct=mean_efficiency(reports),
        reference_speeds={z: reference[z] for z in overlap},
        approx_speeds={z: approx[z] for z in overlap},
    )
    out_dir = ensure_dir(config.out_dir)
    _write_table(
        out_dir,
        FIDELITY_FILE,
        [r.model_dump(mode="json") for r in reports],
        fmt,
        extra={"mean_efficiency_pct": result.mean_efficiency_pct},
    )
    return result


def run_fit_model(config: RunConfig) -> Tuple[ModelWeights, CrossValidationResult, List[PercentPostedSummary]]:
    """Fit the speed model with k-fold cross-validation on the low-fidelity records."""
    records = data_service.load_lowfi_records(_require_path(config.lowfi_path, "low-fidelity"))
    rows = data_service.build_training_rows(records)
    cv_seed = int(_stage_seed(config, _CV_STREAM).generate_state(1)[0])
    weights, cv = fit_with_cv(rows, k=config.k_folds, seed=cv_seed)
    out_dir = ensure_dir(config.out_dir)
    write_json(out_dir / WEIGHTS_FILE, weights.to_json_dict())
    pd.DataFrame([p.model_dump() for p in cv.predictions]).to_csv(
        out_dir / CV_FILE, index=False, lineterminator="\n"
    )
    return weights, cv, data_service.percent_posted_summary(records)


def run_fit_probit(config: RunConfig) -> Tuple[List[FatalityCurve], Dict[CrashType, List[CurvePoint]]]:
    points = data_service.load_fatality_points(_require_path(config.fatality_path, "fatality points"))
    curves = fit_all_curves(points)
    write_json(Path(ensure_dir(config.out_dir)) / CURVES_FILE, [c.to_json_dict() for c in curves])
    return curves, points


def baseline_densities(config: RunConfig) -> Dict[int, Density]:
    """Baseline densities per configured zone, fitted to the hourly weighted averages."""
    bins = data_service.load_highfi_bins(
        _require_path(config.highfi_path, "high-fidelity"), zones=config.zones, bin_width=config.bin_width
    )
    averages = data_service.hourly_baseline_averages(bins, config.bin_width)
    missing = [z for z in config.zones if z not in averages]
    if missing:
        raise InputDataError(f"high-fidelity data has no hours for zones {missing}")
    return {z: kde_fit(averages[z], config.baseline_kernel_width) for z in config.zones}


def run_build_dists(config: RunConfig, weights: Optional[ModelWeights] = None) -> ConditionDistributions:
    if weights is None:
        weights = load_weights(config)
    dists = build_condition_distributions(
        baseline_densities(config),
        weights,
        zones=config.zones,
        n_pred=config.n_pred,
        pred_kernel_width=config.prediction_kernel_width,
        rng=np.random.default_rng(_stage_seed(config, _BUILD_STREAM)),
    )
    write_json(Path(ensure_dir(config.out_dir)) / DISTS_FILE, condition_distributions_to_dict(dists))
    return dists


def run_simulate(
    config: RunConfig,
    cond_dists: Optional[ConditionDistributions] = None,
    curves: Optional[List[FatalityCurve]] = None,
    fmt: str = "json",
) -> Tuple[ZoneMarginal, List[RiskEstimate], List[BaselineComparison]]:
    if cond_dists is None:
        cond_dists = load_condition_distributions(config)
    if curves is None:
        curves = load_curves(config)
    marginal = zone_marginal(config.zones, config.zone_weights)
    estimates = monte_carlo_risk(marginal, cond_dists, curves, config.n_trials, config.seed, workers=config.workers)
    comparisons = compare_to_baseline(estimates)
    out_dir = ensure_dir(config.out_dir)
    _write_table(out_dir, RESULTS_FILE, [e.model_dump(mode="json") for e in estimates], fmt)
    _write_table(out_dir, COMPARISON_FILE, [c.model_dump(mode="json") for c in comparisons], fmt)
    if fmt != "json":
        # The results JSON is the archival artifact regardless of the table format.
        write_json(out_dir / f"{RESULTS_FILE}.json", [e.model_dump(mode="json") for e in estimates])
    return marginal, estimates, comparisons


def _artifact(config: RunConfig, name: str) -> Path:
    path = config.path_in_out(name)
    if not path.is_file():
        raise InputDataError(f"missing artifact {path}; run the producing subcommand first")
    return path


def load_weights(config: RunConfig) -> ModelWeights:
    return ModelWeights.from_json_dict(read_json(_artifact(config, WEIGHTS_FILE)))


def load_curves(config: RunConfig) -> List[FatalityCurve]:
    return [FatalityCurve.from_json_dict(c) for c in read_json(_artifact(config, CURVES_FILE))]


def load_condition_distributions(config: RunConfig) -> ConditionDistributions:
    return condition_distributions_from_dict(read_json(_artifact(config, DISTS_FILE)))


def load_estimates(config: RunConfig) -> List[RiskEstimate]:
    return [RiskEstimate.model_validate(e) for e in read_json(_artifact(config, f"{RESULTS_FILE}.json"))]


def load_cv_result(config: RunConfig) -> CrossValidationResult:
    """Held-out predictions from the CV table, with fold weights from the weights artifact."""
    path = _artifact(config, CV_FILE)
    try:
        table = pd.read_csv(path)
        predictions = [HeldOutPrediction.model_validate(r) for r in table.to_dict(orient="records")]
    except (ValueError, pd.errors.ParserError) as e:
        raise InputDataError(f"{path}: unreadable cross-validation table: {e}") from e
    weights = load_weights(config)
    folds: Dict[int, List[int]] = {}
    for position, p in enumerate(predictions):
        folds.setdefault(p.fold, []).append(position)
    # Fold members are positions in the CV table; training-row indices are not persisted.
    return CrossValidationResult(
        fold_weights=weights.fold_weights,
        folds=[folds[f] for f in sorted(folds)],
        predictions=predictions,
        seed=weights.seed,
    )


def load_percent_summary(config: RunConfig) -> List[PercentPostedSummary]:
    records = data_service.load_lowfi_records(_require_path(config.lowfi_path, "low-fidelity"))
    return data_service.percent_posted_summary(records)


def _run_stage(stage: str, run_id: Optional[str], fn: Callable[[], T]) -> T:
    try:
        with stage_logging(stage, run_id):
            return fn()
    except StageError:
        raise
    except RiskEngineError as e:
        raise StageError(stage, e) from e
    except (OSError, ValueError, ArithmeticError) as e:
        raise StageError(stage, e) from e


def run_full_pipeline(config: RunConfig, fmt: str = "json", emit_figures: bool = True) -> PipelineOutputs:
    """
    compare -> model (with CV) -> fatality -> distributions -> simulate (with baseline comparison),
    then figure data. With no input paths configured, a synthetic dataset is generated first.
    Any stage failure is raised as a StageError naming the stage.
    """
    run_id = f"seed{config.seed}"
    outputs = PipelineOutputs()
    if not (config.lowfi_path or config.highfi_path or config.fatality_path):
        config, _ = _run_stage("generate", run_id, lambda: run_generate(config))

    outputs.compare = _run_stage("compare", run_id, lambda: run_compare(config, fmt))
    outputs.weights, outputs.cv, outputs.percent_summary = _run_stage("model", run_id, lambda: run_fit_model(config))
    outputs.curves, outputs.fatality_points = _run_stage("fatality", run_id, lambda: run_fit_probit(config))
    outputs.cond_dists = _run_stage(
        "distributions", run_id, lambda: run_build_dists(config, outputs.weights)
    )
    outputs.marginal, outputs.estimates, outputs.comparisons = _run_stage(
        "simulate", run_id, lambda: run_simulate(config, outputs.cond_dists, outputs.curves, fmt)
    )
    if emit_figures:
        outputs.written = _run_stage("figures", run_id, lambda: emit_figure_data(outputs, config.out_dir, config))
    return outputs
