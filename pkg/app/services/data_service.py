import io
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.special import ndtr

from app.core.config import CalibrationConfig
from app.core.errors import ConfigurationError, InputDataError, NumericalError, row_error
from app.core.logging import get_logger
from app.core.utils import stable_mean, standard_error
from app.models.risk_models import TrainingRow
from app.models.speed_models import (
    CRASH_TYPE_ORDER,
    BinnedZoneCount,
    Condition,
    CrashType,
    CurvePoint,
    Fidelity,
    PercentPostedSummary,
    SpeedRecord,
    TechGroup,
)

logger = get_logger("data_service")

LOWFI_COLUMNS = ["participant_id", "fidelity", "tech_group", "ivs_present", "zone_mph", "speed_mph"]
HIGHFI_COLUMNS = ["zone_mph", "hour_index", "bin_lower_mph", "count"]
FATALITY_COLUMNS = ["crash_type", "speed_mph", "fatality_fraction", "n_obs"]

DEFAULT_BIN_WIDTH = 5.0

Source = Union[str, TextIO]


@dataclass(frozen=True)
class SyntheticDataset:
    lowfi_records: List[SpeedRecord]
    highfi_bins: List[BinnedZoneCount]
    fatality_points: Dict[CrashType, List[CurvePoint]]


def _read_table(stream: Source, columns: List[str], path: Optional[str] = None) -> List[Tuple[int, Dict[str, str]]]:
    """
    Read a CSV with an exact header into (row number, fields) pairs.

    Row numbers are file lines, counting the header as row 1; blank lines are row errors.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    try:
        df = pd.read_csv(stream, dtype=str, keep_default_na=False, skipinitialspace=True, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise InputDataError(f"{path or 'input'}: missing header, expected {','.join(columns)}")
    except pd.errors.ParserError as e:
        raise InputDataError(f"{path or 'input'}: malformed CSV: {e}")

    header = [c.strip() for c in df.columns]
    if header != columns:
        raise InputDataError(
            f"{path or 'input'}: unexpected header {','.join(header)}, expected {','.join(columns)}"
        )
    df.columns = header

    rows = []
    for offset, record in enumerate(df.to_dict(orient="records")):
        row_number = offset + 2
        if all(not isinstance(v, str) or v.strip() == "" for v in record.values()):
            raise row_error(row_number, "blank line", path)
        for column in columns:
            value = record.get(column)
            if not isinstance(value, str) or value.strip() == "":
                raise row_error(row_number, f"missing value for {column}", path)
        rows.append((row_number, {k: v.strip() for k, v in record.items()}))
    return rows


def _parse_number(value: str, column: str, row_number: int, path: Optional[str], kind=float):
    try:
        number = float(value)
    except ValueError:
        raise row_error(row_number, f"{column} is not a number: {value!r}", path)
    if not np.isfinite(number):
        raise row_error(row_number, f"{column} is not finite: {value!r}", path)
    if kind is int:
        if number != int(number):
            raise row_error(row_number, f"{column} must be an integer: {value!r}", path)
        return int(number)
    return number


def _parse_bool(value: str, column: str, row_number: int, path: Optional[str]) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true"):
        return True
    if lowered in ("0", "false"):
        return False
    raise row_error(row_number, f"{column} must be 0 or 1: {value!r}", path)


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    message = err.get("msg", str(e))
    return message.replace("Value error, ", "")


def parse_lowfi_records(
    stream: Source,
    zones: Optional[Iterable[int]] = None,
    path: Optional[str] = None,
) -> List[SpeedRecord]:
    """
    Parse low-fidelity (simulator) speed records.

    Args:
        stream: CSV text or a text stream with the low-fidelity header
        zones: Accepted posted speeds; any positive zone when None
        path: File name used in error messages

    Returns:
        One SpeedRecord per data row
    """
    context = {"zones": set(zones)} if zones is not None else {}
    records = []
    for row_number, row in _read_table(stream, LOWFI_COLUMNS, path):
        data = {
            "participant_id": row["participant_id"],
            "fidelity": row["fidelity"],
            "tech_group": row["tech_group"],
            "ivs_present": _parse_bool(row["ivs_present"], "ivs_present", row_number, path),
            "zone_mph": _parse_number(row["zone_mph"], "zone_mph", row_number, path, kind=int),
            "speed_mph": _parse_number(row["speed_mph"], "speed_mph", row_number, path),
        }
        try:
            records.append(SpeedRecord.model_validate(data, context=context))
        except ValidationError as e:
            raise row_error(row_number, _first_error(e), path)
    logger.debug(f"Parsed {len(records)} low-fidelity records")
    return records


def parse_highfi_bins(
    stream: Source,
    zones: Optional[Iterable[int]] = None,
    bin_width: float = DEFAULT_BIN_WIDTH,
    path: Optional[str] = None,
    strict: bool = False,
) -> List[BinnedZoneCount]:
    """
    Parse high-fidelity binned hourly counts.

    Rows for zones outside `zones` are dropped with a warning; with strict=True they are row errors.
    """
    zone_set = set(zones) if zones is not None else None
    context = {"bin_width": bin_width}
    if strict and zone_set is not None:
        context["zones"] = zone_set
    bins = []
    dropped: Dict[int, int] = defaultdict(int)
    for row_number, row in _read_table(stream, HIGHFI_COLUMNS, path):
        data = {
            "zone_mph": _parse_number(row["zone_mph"], "zone_mph", row_number, path, kind=int),
            "hour_index": _parse_number(row["hour_index"], "hour_index", row_number, path, kind=int),
            "bin_lower_mph": _parse_number(row["bin_lower_mph"], "bin_lower_mph", row_number, path),
            "count": _parse_number(row["count"], "count", row_number, path, kind=int),
        }
        try:
            parsed = BinnedZoneCount.model_validate(data, context=context)
        except ValidationError as e:
            raise row_error(row_number, _first_error(e), path)
        if zone_set is not None and parsed.zone_mph not in zone_set:
            dropped[parsed.zone_mph] += 1
            continue
        bins.append(parsed)
    if dropped:
        summary = ", ".join(f"{zone} mph ({n} rows)" for zone, n in sorted(dropped.items()))
        logger.warning(f"{path or 'high-fidelity input'}: skipping unconfigured zones {summary}")
    return bins


def parse_fatality_points(stream: Source, path: Optional[str] = None) -> Dict[CrashType, List[CurvePoint]]:
    """Parse fatality curve points grouped by crash type (in file order within each type)."""
    points: Dict[CrashType, List[CurvePoint]] = {}
    for row_number, row in _read_table(stream, FATALITY_COLUMNS, path):
        try:
            crash_type = CrashType(row["crash_type"])
        except ValueError:
            raise row_error(row_number, f"unknown crash type {row['crash_type']!r}", path)
        data = {
            "speed_mph": _parse_number(row["speed_mph"], "speed_mph", row_number, path),
            "fatality_fraction": _parse_number(row["fatality_fraction"], "fatality_fraction", row_number, path),
            "n_obs": _parse_number(row["n_obs"], "n_obs", row_number, path),
        }
        try:
            points.setdefault(crash_type, []).append(CurvePoint.model_validate(data))
        except ValidationError as e:
            raise row_error(row_number, _first_error(e), path)
    return points


def _open(path: str) -> TextIO:
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise InputDataError(f"cannot read {path}: {e}") from e


def load_lowfi_records(path: str, zones: Optional[Iterable[int]] = None) -> List[SpeedRecord]:
    with _open(path) as f:
        return parse_lowfi_records(f, zones=zones, path=path)


def load_highfi_bins(path: str, zones: Optional[Iterable[int]] = None,
                     bin_width: float = DEFAULT_BIN_WIDTH) -> List[BinnedZoneCount]:
    with _open(path) as f:
        return parse_highfi_bins(f, zones=zones, bin_width=bin_width, path=path)


def load_fatality_points(path: str) -> Dict[CrashType, List[CurvePoint]]:
    with _open(path) as f:
        return parse_fatality_points(f, path=path)


def serialize_lowfi_records(records: Sequence[SpeedRecord]) -> str:
    df = pd.DataFrame(
        [
            [r.participant_id, r.fidelity.value, r.tech_group.value, int(r.ivs_present), r.zone_mph, r.speed_mph]
            for r in records
        ],
        columns=LOWFI_COLUMNS,
    )
    return df.to_csv(index=False, lineterminator="\n")


def serialize_highfi_bins(bins: Sequence[BinnedZoneCount]) -> str:
    df = pd.DataFrame(
        [[b.zone_mph, b.hour_index, b.bin_lower_mph, b.count] for b in bins],
        columns=HIGHFI_COLUMNS,
    )
    return df.to_csv(index=False, lineterminator="\n")


def serialize_fatality_points(points: Dict[CrashType, List[CurvePoint]]) -> str:
    rows = []
    for crash_type in CRASH_TYPE_ORDER:
        for p in points.get(crash_type, []):
            rows.append([crash_type.value, p.speed_mph, p.fatality_fraction, p.n_obs])
    return pd.DataFrame(rows, columns=FATALITY_COLUMNS).to_csv(index=False, lineterminator="\n")


def hourly_weighted_average(bins: Sequence[BinnedZoneCount], bin_width: float = DEFAULT_BIN_WIDTH) -> float:
    """
    Count-weighted mean of bin centers for one zone and one hour.

    Args:
        bins: Bins sharing a zone and an hour
        bin_width: Bin width in mph; centers sit at lower edge + width / 2

    Returns:
        The hourly average speed in mph
    """
    if not bins:
        raise InputDataError("no bins given for the hourly average")
    keys = {(b.zone_mph, b.hour_index) for b in bins}
    if len(keys) > 1:
        raise InputDataError(f"bins span several zones or hours: {sorted(keys)}")
    counts = np.array([b.count for b in bins], dtype=float)
    total = counts.sum()
    if total <= 0:
        zone, hour = keys.pop()
        raise NumericalError(f"zero total count for zone {zone} hour {hour}")
    centers = np.array([b.bin_lower_mph for b in bins], dtype=float) + bin_width / 2.0
    return float(np.dot(centers, counts) / total)


def percent_posted_speed(record: SpeedRecord) -> float:
    """Observed speed as a percentage of the posted speed."""
    return 100.0 * record.speed_mph / record.zone_mph


def condition_of(record: SpeedRecord) -> Condition:
    return record.condition


def _group_bins(bins: Sequence[BinnedZoneCount]) -> Dict[Tuple[int, int], List[BinnedZoneCount]]:
    grouped: Dict[Tuple[int, int], List[BinnedZoneCount]] = defaultdict(list)
    for b in bins:
        grouped[(b.zone_mph, b.hour_index)].append(b)
    return grouped


def hourly_baseline_averages(
    bins: Sequence[BinnedZoneCount], bin_width: float = DEFAULT_BIN_WIDTH
) -> Dict[int, np.ndarray]:
    """Hourly weighted average speeds per zone, ordered by hour."""
    averages: Dict[int, List[float]] = defaultdict(list)
    for (zone, hour), group in sorted(_group_bins(bins).items()):
        if sum(b.count for b in group) == 0:
            logger.warning(f"Skipping zone {zone} hour {hour}: no vehicles counted")
            continue
        averages[zone].append(hourly_weighted_average(group, bin_width))
    return {zone: np.array(values) for zone, values in sorted(averages.items())}


def expand_bin_centers(
    bins: Sequence[BinnedZoneCount], bin_width: float = DEFAULT_BIN_WIDTH
) -> Dict[int, np.ndarray]:
    """Per-vehicle speeds per zone, each bin center repeated by its count."""
    centers: Dict[int, List[np.ndarray]] = defaultdict(list)
    for b in sorted(bins, key=lambda b: (b.zone_mph, b.hour_index, b.bin_lower_mph)):
        if b.count:
            centers[b.zone_mph].append(np.full(b.count, b.bin_lower_mph + bin_width / 2.0))
    return {zone: np.concatenate(parts) for zone, parts in sorted(centers.items())}


def baseline_speeds_by_zone(records: Sequence[SpeedRecord]) -> Dict[int, np.ndarray]:
    """Baseline (IVS absent) speeds per zone, both technology groups pooled."""
    speeds: Dict[int, List[float]] = defaultdict(list)
    for r in records:
        if r.condition is Condition.BASELINE:
            speeds[r.zone_mph].append(r.speed_mph)
    return {zone: np.array(values) for zone, values in sorted(speeds.items())}


def _participant_averaged_baselines(records: Sequence[SpeedRecord]) -> Dict[Tuple[TechGroup, int], float]:
    per_participant: Dict[Tuple[TechGroup, int, str], List[float]] = defaultdict(list)
    for r in records:
        if r.fidelity is Fidelity.LOW and r.condition is Condition.BASELINE:
            per_participant[(r.tech_group, r.zone_mph, r.participant_id)].append(r.speed_mph)
    participant_means: Dict[Tuple[TechGroup, int], List[float]] = defaultdict(list)
    for (group, zone, _), speeds in sorted(per_participant.items()):
        participant_means[(group, zone)].append(stable_mean(speeds))
    return {key: stable_mean(means) for key, means in participant_means.items()}


def build_training_rows(records: Sequence[SpeedRecord]) -> List[TrainingRow]:
    """
    Training rows for the speed model from low-fidelity records.

    Each IVS-present record becomes one row whose feature is the participant-averaged
    baseline speed of its technology group in its zone.
    """
    baselines = _participant_averaged_baselines(records)
    rows = []
    skipped = 0
    for r in records:
        condition = condition_of(r)
        if r.fidelity is not Fidelity.LOW or condition is Condition.BASELINE:
            continue
        baseline = baselines.get((r.tech_group, r.zone_mph))
        if baseline is None:
            skipped += 1
            continue
        rows.append(TrainingRow(baseline_speed=baseline, delta_es=condition.delta_es, target_speed=r.speed_mph))
    if skipped:
        logger.warning(f"Dropped {skipped} IVS records without a baseline in their group and zone")
    return rows


def percent_posted_summary(records: Sequence[SpeedRecord]) -> List[PercentPostedSummary]:
    """
    Mean across participants of each participant's median percent posted speed, per condition.

    Baseline is summarized once over all participants.
    """
    per_participant: Dict[Tuple[Condition, str], List[float]] = defaultdict(list)
    for r in records:
        if r.fidelity is Fidelity.LOW:
            per_participant[(condition_of(r), r.participant_id)].append(percent_posted_speed(r))
    summaries = []
    for condition in Condition:
        medians = [float(np.median(v)) for (c, _), v in sorted(per_participant.items()) if c is condition]
        if not medians:
            continue
        summaries.append(
            PercentPostedSummary(
                condition=condition,
                mean_pct=stable_mean(medians),
                se_pct=standard_error(medians),
                n_participants=len(medians),
            )
        )
    return summaries


def load_reference_speeds(
    path: str,
    zones: Optional[Iterable[int]] = None,
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> Dict[int, np.ndarray]:
    """
    Reference (high-fidelity side) speeds per zone from either file format.

    Binned counts expand to bin centers; per-record files contribute their baseline speeds.
    """
    with _open(path) as f:
        header = f.readline().strip().split(",")
        f.seek(0)
        header = [h.strip() for h in header]
        if header == HIGHFI_COLUMNS:
            return expand_bin_centers(parse_highfi_bins(f, zones=zones, bin_width=bin_width, path=path), bin_width)
        if header == LOWFI_COLUMNS:
            # Per-record files may cover zones outside the high-fidelity set.
            return baseline_speeds_by_zone(parse_lowfi_records(f, path=path))
    raise InputDataError(f"{path}: unrecognized header {','.join(header)}")


def generate_synthetic_dataset(
    config: CalibrationConfig,
    seed: int,
    bin_width: float = DEFAULT_BIN_WIDTH,
    zones: Optional[Iterable[int]] = None,
) -> SyntheticDataset:
    """
    Generate calibrated synthetic low-fidelity records, high-fidelity counts and fatality points.

    Draws are normal: low-fidelity percent posted speed = condition target + participant offset
    + record noise; high-fidelity vehicle speeds = zone mean + hourly offset + vehicle noise,
    floored to bin edges; fatality fractions are binomial draws from the generating curves.

    Args:
        config: Calibration targets
        seed: Seed; equal seeds give identical datasets
        bin_width: High-fidelity bin width in mph
        zones: High-fidelity zones to emit; every calibrated zone when None

    Returns:
        The synthetic dataset
    """
    if not config.zones or not config.lowfi_zones:
        raise ConfigurationError("calibration needs nonempty zone lists")
    calibrated = {z.zone_mph for z in config.zones}
    keep = set(zones) if zones is not None else calibrated
    uncalibrated = keep - calibrated
    if uncalibrated:
        raise ConfigurationError(f"no high-fidelity calibration for zones {sorted(uncalibrated)}")
    lowfi_ss, highfi_ss, fatality_ss = np.random.SeedSequence(seed).spawn(3)

    lowfi = _generate_lowfi(config, np.random.default_rng(lowfi_ss))
    highfi = [b for b in _generate_highfi(config, np.random.default_rng(highfi_ss), bin_width) if b.zone_mph in keep]
    points = _generate_fatality_points(config, np.random.default_rng(fatality_ss))
    logger.info(
        f"Generated {len(lowfi)} low-fidelity records, {len(highfi)} high-fidelity bins, "
        f"{sum(len(p) for p in points.values())} fatality points (seed {seed})"
    )
    return SyntheticDataset(lowfi_records=lowfi, highfi_bins=highfi, fatality_points=points)


def _positive_draw(rng: np.random.Generator, mean: float, sd: float) -> float:
    value = rng.normal(mean, sd)
    while value <= 0:
        value = rng.normal(mean, sd)
    return value


def _generate_lowfi(config: CalibrationConfig, rng: np.random.Generator) -> List[SpeedRecord]:
    targets = config.condition_targets_pct
    groups = [TechGroup.IVS_PLUS_ES] * config.participants_per_group + [TechGroup.IVS_MINUS_ES] * config.participants_per_group
    width = len(str(len(groups)))
    records = []
    for index, group in enumerate(groups, start=1):
        participant_id = f"p{index:0{max(width, 2)}d}"
        offset = rng.normal(0.0, config.participant_spread_pct)
        for zone in config.lowfi_zones:
            for ivs_present in (False, True):
                target = targets[group.value] if ivs_present else targets[Condition.BASELINE.value]
                for _ in range(config.passes_per_zone):
                    pct = _positive_draw(rng, target + offset, config.lowfi_spread_pct)
                    records.append(
                        SpeedRecord(
                            participant_id=participant_id,
                            fidelity=Fidelity.LOW,
                            tech_group=group,
                            ivs_present=ivs_present,
                            zone_mph=zone,
                            speed_mph=round(zone * pct / 100.0, 2),
                        )
                    )
    return records


def _generate_highfi(config: CalibrationConfig, rng: np.random.Generator, bin_width: float) -> List[BinnedZoneCount]:
    bins = []
    for zone in config.zones:
        for hour in range(config.hours_per_zone):
            hour_mean = zone.highfi_mean_mph + rng.normal(0.0, config.hourly_spread_mph)
            speeds = rng.normal(hour_mean, zone.highfi_spread_mph, size=config.vehicles_per_hour)
            speeds = speeds[speeds > 0]
            edges, counts = np.unique(np.floor(speeds / bin_width) * bin_width, return_counts=True)
            for lower, count in zip(edges, counts):
                bins.append(
                    BinnedZoneCount(
                        zone_mph=zone.zone_mph,
                        hour_index=hour,
                        bin_lower_mph=float(lower),
                        count=int(count),
                    )
                )
    return bins


def _generate_fatality_points(config: CalibrationConfig, rng: np.random.Generator) -> Dict[CrashType, List[CurvePoint]]:
    points: Dict[CrashType, List[CurvePoint]] = {}
    for curve in config.fatality_curves:
        crash_type = CrashType(curve.crash_type)
        for speed in config.fatality_speeds_mph:
            p = float(ndtr(curve.intercept_a + curve.slope_b * speed))
            fatal = rng.binomial(config.fatality_n_obs, p)
            points.setdefault(crash_type, []).append(
                CurvePoint(
                    speed_mph=float(speed),
                    fatality_fraction=fatal / config.fatality_n_obs,
                    n_obs=float(config.fatality_n_obs),
                )
            )
    return points
