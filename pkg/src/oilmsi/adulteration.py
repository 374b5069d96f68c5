"""Adulteration-level estimation from Bhattacharyya distances in discriminant space.

Each sample's projected ROI pixels are modelled as a multivariate Gaussian.
Its Bhattacharyya distance to the pure-oil reference, normalized by the
largest training-class distance, is calibrated against the known fraction
with ``Y = a X**2 + b X`` and inverted for unknown samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .cube import SpectralCube, _atomic_write
from .fda import FdaModel, fda_from_lines, fda_to_lines, project
from .preprocess import Roi, extract_roi

COV_REGULARIZATION = 1e-10
LINEAR_FALLBACK = 1e-12
DEFAULT_REFERENCE_SIZE = 900


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianClassModel:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(rows: np.ndarray) -> GaussianClassModel:
    """Sample mean and (m - 1)-normalized covariance plus ``eps * I``.

    ``eps = 1e-10 * trace / k``; a zero-spread block falls back to
    ``eps = 1e-10``.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    m, k = rows.shape
    if m < k + 1:
        raise CalibrationError(f"need at least {k + 1} rows for a {k}-D Gaussian, got {m}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (m - 1)
    cov = 0.5 * (cov + cov.T)
    trace = np.trace(cov)
    eps = COV_REGULARIZATION * (trace / k if trace > 0 else 1.0)
    cov = cov + eps * np.eye(k)
    try:
        linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise CalibrationError("zero-variance dimension in class covariance") from exc
    return GaussianClassModel(mean, cov, m)


def _logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.log(np.diag(chol)).sum())


def bhattacharyya(a: GaussianClassModel, b: GaussianClassModel) -> float:
    """Bhattacharyya distance between two multivariate Gaussians."""
    if a.dim != b.dim:
        raise CalibrationError(f"dimension mismatch: {a.dim} vs {b.dim}")
    pooled = 0.5 * (a.covariance + b.covariance)
    try:
        Lp = linalg.cholesky(pooled, lower=True)
        La = linalg.cholesky(a.covariance, lower=True)
        Lb = linalg.cholesky(b.covariance, lower=True)
    except linalg.LinAlgError as exc:
        raise CalibrationError("covariance is not positive definite") from exc
    z = linalg.solve_triangular(Lp, a.mean - b.mean, lower=True)
    mahal = float(z @ z)
    log_ratio = _logdet(Lp) - 0.5 * (_logdet(La) + _logdet(Lb))
    return max(0.125 * mahal + 0.5 * log_ratio, 0.0)


# --- calibration -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationPoint:
    fraction: float
    mean_distance: float  # normalized
    replicate_distances: tuple[float, ...]  # normalized


@dataclass(frozen=True, eq=False)
class AdulterationModel:
    coeff_a: float
    coeff_b: float
    normalizer: float
    reference: GaussianClassModel
    fda: FdaModel
    r_squared: float
    calibration: tuple[CalibrationPoint, ...] = field(default=())

    def predict(self, fraction):
        x = np.asarray(fraction, dtype=float)
        return self.coeff_a * x**2 + self.coeff_b * x


def fit_through_origin(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a x**2 + b x``; returns ``(a, b, r_squared)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    design = np.column_stack([x**2, x])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ np.array([a, b])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def fit_model(
    training: Sequence[tuple[float, np.ndarray]],
    fda: FdaModel,
    reference_size: int = DEFAULT_REFERENCE_SIZE,
    seed: int = 0,
) -> AdulterationModel:
    """Calibrate distance against adulteration fraction.

    ``training`` holds one ``(fraction, projected block)`` entry per replicate.
    The reference Gaussian is fit to ``reference_size`` pixels drawn (seeded)
    from the pooled fraction-0 replicates.
    """
    fractions = sorted({float(f) for f, _ in training})
    if 0.0 not in fractions:
        raise CalibrationError("training data lacks the pure (fraction 0) reference class")
    if len(fractions) < 3:
        raise CalibrationError("need at least 3 distinct adulteration levels")

    pure = np.vstack([blk for f, blk in training if float(f) == 0.0])
    rng = np.random.default_rng(seed)
    if reference_size and reference_size < pure.shape[0]:
        pure = pure[np.sort(rng.choice(pure.shape[0], reference_size, replace=False))]
    reference = fit_gaussian(pure)

    raw: dict[float, list[float]] = {f: [] for f in fractions}
    for f, blk in training:
        raw[float(f)].append(bhattacharyya(fit_gaussian(blk), reference))
    means = np.array([np.mean(raw[f]) for f in fractions])
    normalizer = float(means.max())
    if not normalizer > 0:
        raise CalibrationError("all training distances are zero")

    y = means / normalizer
    a, b, r2 = fit_through_origin(fractions, y)
    points = tuple(
        CalibrationPoint(f, float(yi), tuple(d / normalizer for d in raw[f]))
        for f, yi in zip(fractions, y)
    )
    return AdulterationModel(a, b, normalizer, reference, fda, r2, points)


def invert_quadratic(y: float, a: float, b: float) -> float:
    """Non-negative root of ``a x**2 + b x = y``."""
    if y < 0:
        raise CalibrationError("negative normalized distance")
    if abs(a) < LINEAR_FALLBACK:
        if b == 0:
            raise CalibrationError("degenerate calibration curve")
        return y / b
    disc = b * b + 4.0 * a * y
    if disc < 0:
        raise CalibrationError("out of calibration range")
    root = np.sqrt(disc)
    if b >= 0:
        # cancellation-free form of (-b + root) / (2a)
        return 2.0 * y / (b + root) if y > 0 else 0.0
    return (-b + root) / (2.0 * a)


def normalized_distance(block: np.ndarray, model: AdulterationModel) -> float:
    """Normalized distance of raw 9-band pixel spectra from the reference class."""
    g = fit_gaussian(project(block, model.fda))
    return bhattacharyya(g, model.reference) / model.normalizer


def estimate_block(block: np.ndarray, model: AdulterationModel) -> float:
    y = normalized_distance(block, model)
    x = invert_quadratic(y, model.coeff_a, model.coeff_b)
    return float(np.clip(x, 0.0, 1.0))


def estimate(sample: SpectralCube, model: AdulterationModel, roi: Roi) -> float:
    """Adulteration fraction of a preprocessed cube from its ROI pixels."""
    return estimate_block(extract_roi(sample, roi), model)


def mse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(actual, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predicted and actual must be non-empty and of equal length")
    return float(np.mean((p - t) ** 2))


# --- persistence -------------------------------------------------------------


def model_to_dict(model: AdulterationModel) -> dict:
    return {
        "format": "oilmsi-adulteration-model",
        "coeff_a": model.coeff_a,
        "coeff_b": model.coeff_b,
        "normalizer": model.normalizer,
        "r_squared": model.r_squared,
        "reference": {
            "mean": model.reference.mean.tolist(),
            "covariance": model.reference.covariance.tolist(),
            "sample_count": model.reference.sample_count,
        },
        "calibration": [
            {
                "fraction": p.fraction,
                "mean_distance": p.mean_distance,
                "replicate_distances": list(p.replicate_distances),
            }
            for p in model.calibration
        ],
        "fda": fda_to_lines(model.fda),
    }


def model_from_dict(d: dict) -> AdulterationModel:
    try:
        ref = d["reference"]
        reference = GaussianClassModel(
            np.array(ref["mean"], dtype=float),
            np.array(ref["covariance"], dtype=float),
            int(ref["sample_count"]),
        )
        calibration = tuple(
            CalibrationPoint(p["fraction"], p["mean_distance"], tuple(p["replicate_distances"]))
            for p in d.get("calibration", [])
        )
        return AdulterationModel(
            float(d["coeff_a"]),
            float(d["coeff_b"]),
            float(d["normalizer"]),
            reference,
            fda_from_lines(d["fda"]),
            float(d["r_squared"]),
            calibration,
        )
    except (KeyError, TypeError) as exc:
        raise CalibrationError(f"malformed adulteration model ({exc})") from exc


def save_model(model: AdulterationModel, path) -> None:
    _atomic_write(Path(path), json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> AdulterationModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"{path}: malformed model file") from exc
    return model_from_dict(d)


def calibration_csv_lines(model: AdulterationModel) -> list[str]:
    width = max((len(p.replicate_distances) for p in model.calibration), default=0)
    header = ["fraction", "mean_normalized_distance"] + [f"replicate_{i + 1}" for i in range(width)]
    lines = [",".join(header)]
    for p in model.calibration:
        reps = [repr(v) for v in p.replicate_distances] + [""] * (width - len(p.replicate_distances))
        lines.append(",".join([repr(p.fraction), repr(p.mean_distance), *reps]))
    return lines
