from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import InputDataError, NumericalError
from app.core.logging import get_logger
from app.core.utils import stable_mean, standard_error
from app.models.risk_models import (
    CrossValidationResult,
    HeldOutPrediction,
    ModelWeights,
    SpeedPrediction,
    TrainingRow,
)

logger = get_logger("model_service")

N_WEIGHTS = 4


def design_row(baseline_speed: float, delta_es: int) -> Tuple[float, float, float, float]:
    """Speed-model features (1, s, delta, s^2) in that order."""
    s = float(baseline_speed)
    return (1.0, s, float(delta_es), s * s)


def design_matrix(baseline_speeds: Sequence[float], deltas: Union[Sequence[int], int]) -> np.ndarray:
    s = np.asarray(baseline_speeds, dtype=float).ravel()
    d = np.broadcast_to(np.asarray(deltas, dtype=float), s.shape)
    return np.column_stack([np.ones_like(s), s, d, s * s])


def _solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Column equilibration before the SVD-based solve keeps s and s^2 on comparable scales.
    scale = np.linalg.norm(x, axis=0)
    scale[scale == 0] = 1.0
    solution, _, rank, _ = np.linalg.lstsq(x / scale, y, rcond=None)
    if rank < x.shape[1]:
        raise NumericalError(
            f"rank-deficient design (rank {rank} of {x.shape[1]}); need at least three distinct "
            "baseline speeds and both external-sign states"
        )
    return solution / scale


def _arrays(rows: Sequence[TrainingRow]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.array([r.baseline_speed for r in rows], dtype=float)
    d = np.array([r.delta_es for r in rows], dtype=float)
    y = np.array([r.target_speed for r in rows], dtype=float)
    return s, d, y


def fit_least_squares(rows: Sequence[TrainingRow]) -> ModelWeights:
    """
    Ordinary least-squares fit of the speed model.

    Args:
        rows: At least four rows whose design has full rank

    Returns:
        Pooled ModelWeights (no fold weights)
    """
    if len(rows) < N_WEIGHTS:
        raise NumericalError(f"need at least {N_WEIGHTS} rows to fit four weights, got {len(rows)}")
    s, d, y = _arrays(rows)
    return ModelWeights.from_array(_solve(design_matrix(s, d), y))


def _as_rng(rng: Union[np.random.Generator, int, None]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def kfold_cv(
    rows: Sequence[TrainingRow],
    k: int = 10,
    rng: Union[np.random.Generator, int, None] = None,
) -> CrossValidationResult:
    """
    k-fold cross-validation of the speed model.

    Rows are shuffled with the given generator and split into k near-equal folds; each fold's
    weights are fitted on the other k - 1 folds and used to predict the held-out rows.

    Returns:
        Fold weights, fold membership and held-out predictions (in fold order)
    """
    if k < 2:
        raise InputDataError(f"k must be at least 2, got {k}")
    n = len(rows)
    if n < k:
        raise InputDataError(f"{n} rows cannot be split into {k} folds")
    seed = rng if isinstance(rng, int) else None
    generator = _as_rng(rng)
    order = generator.permutation(n)
    folds = [np.sort(f) for f in np.array_split(order, k)]
    s, d, y = _arrays(rows)
    x = design_matrix(s, d)

    fold_weights = []
    predictions = []
    for fold_index, held_out in enumerate(folds):
        train = np.ones(n, dtype=bool)
        train[held_out] = False
        if train.sum() < N_WEIGHTS:
            raise NumericalError(f"fold {fold_index} leaves fewer than {N_WEIGHTS} training rows")
        w = _solve(x[train], y[train])
        fold_weights.append(tuple(float(v) for v in w))
        predicted = x[held_out] @ w
        for i, p in zip(held_out, predicted):
            predictions.append(
                HeldOutPrediction(
                    fold=fold_index,
                    baseline_speed=float(s[i]),
                    delta_es=int(d[i]),
                    predicted_mph=float(p),
                    actual_mph=float(y[i]),
                )
            )
    return CrossValidationResult(
        fold_weights=fold_weights,
        folds=[f.tolist() for f in folds],
        predictions=predictions,
        seed=seed,
    )


def median_abs_error(pairs: Sequence[Union[HeldOutPrediction, Tuple[float, float]]]) -> float:
    """Median of |predicted - actual|; an even count takes the midpoint of the central pair."""
    if not pairs:
        raise InputDataError("no predictions to score")
    residuals = []
    for pair in pairs:
        if isinstance(pair, HeldOutPrediction):
            residuals.append(pair.residual)
        else:
            predicted, actual = pair
            residuals.append(predicted - actual)
    return float(np.median(np.abs(residuals)))


def fit_with_cv(rows: Sequence[TrainingRow], k: int = 10, seed: Optional[int] = None) -> Tuple[ModelWeights, CrossValidationResult]:
    """Pooled fit plus k-fold cross-validation; the weights carry the fold fits and CV error."""
    pooled = fit_least_squares(rows)
    cv = kfold_cv(rows, k=k, rng=seed)
    error = median_abs_error(cv.predictions)
    logger.info(
        f"Fitted speed model on {len(rows)} rows: w={np.round(pooled.pooled, 6).tolist()}, "
        f"{k}-fold median absolute error {error:.3f} mph"
    )
    weights = pooled.model_copy(update={
        "fold_weights": cv.fold_weights,
        "k": k,
        "seed": seed,
        "cv_median_abs_error_mph": error,
    })
    return weights, cv


def predict(weights: ModelWeights, baseline_speed: float, delta_es: int) -> SpeedPrediction:
    """
    Speed-model prediction w0 + w1 s + w2 delta + w3 s^2.

    With fold weights present, also the mean and standard error across folds.
    """
    x = np.array(design_row(baseline_speed, delta_es))
    value = float(x @ weights.pooled)
    if not weights.fold_weights:
        return SpeedPrediction(speed_mph=value)
    per_fold = [float(x @ np.asarray(w)) for w in weights.fold_weights]
    return SpeedPrediction(
        speed_mph=value,
        fold_mean_mph=stable_mean(per_fold),
        fold_se_mph=standard_error(per_fold),
    )


def predict_many(weights: ModelWeights, baseline_speeds: Sequence[float], delta_es: int) -> np.ndarray:
    """Vectorized pooled-weight prediction."""
    return design_matrix(baseline_speeds, delta_es) @ weights.pooled
