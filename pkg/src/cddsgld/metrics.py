"""Evaluation of sampled models: ensemble prediction, accuracy, ECE, posterior error."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .models import GaussianPosterior, ModelSpec, predictive_distribution

CSV_COLUMNS = (
    "algorithm", "topology", "snr_db", "seed", "accuracy", "ece",
    "mean_err", "cov_err", "retained_samples", "status",
)


def ensemble_predict(samples: Sequence[np.ndarray] | np.ndarray, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """Average of the predictive distributions of every sample."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[None, :]
    if samples.shape[0] == 0:
        raise ValueError("ensemble_predict needs at least one sample")
    total = None
    # chunked to bound the (samples, examples, classes) intermediate
    for start in range(0, samples.shape[0], 64):
        p = predictive_distribution(spec, samples[start:start + 64], np.asarray(inputs, dtype=float)).sum(axis=0)
        total = p if total is None else total + p
    return total / samples.shape[0]


def _validate(predictions: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape[0] != y.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("label out of range")
    return p, y


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax hits; ``np.argmax`` already resolves ties to the lowest class."""
    p, y = _validate(predictions, labels)
    if y.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(np.argmax(p, axis=1) == y))


@dataclass(frozen=True)
class CalibrationBins:
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def ece(self) -> float:
        n = self.n
        if n == 0:
            return 0.0
        gaps = np.abs(self.accuracy - self.confidence)
        return float(np.sum(self.counts / n * gaps))


def calibration_bins(predictions: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> CalibrationBins:
    """Group examples by top-class probability into ``n_bins`` right-closed intervals of ``[0, 1]``."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    p, y = _validate(predictions, labels)
    conf = p.max(axis=1)
    hit = (np.argmax(p, axis=1) == y).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    safe = np.maximum(counts, 1)
    acc = np.bincount(idx, weights=hit, minlength=n_bins) / safe
    cf = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    return CalibrationBins(counts, acc, cf)


def ece(predictions: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> float:
    """Expected calibration error; empty bins contribute nothing."""
    return calibration_bins(predictions, labels, n_bins).ece()


def posterior_moment_error(samples: np.ndarray, oracle: GaussianPosterior) -> tuple[float, float]:
    """Relative error of the sample mean (Euclidean) and sample covariance (Frobenius).

    The mean error falls back to the absolute norm when the oracle mean is zero.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two samples to estimate a covariance")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    ref = np.linalg.norm(oracle.mean)
    mean_err = np.linalg.norm(mu - oracle.mean) / (ref if ref > 0 else 1.0)
    cov_err = np.linalg.norm(cov - oracle.covariance) / np.linalg.norm(oracle.covariance)
    return float(mean_err), float(cov_err)


def batch_means_se(chain: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Monte Carlo standard error of the mean of an autocorrelated chain (per coordinate)."""
    x = np.asarray(chain, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    b = x.shape[0] // n_batches
    if b < 1:
        raise ValueError("chain shorter than the number of batches")
    means = x[: b * n_batches].reshape(n_batches, b, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


@dataclass
class EvaluationReport:
    algorithm: str
    topology: str
    snr_db: float
    seed: int
    accuracy: float | None = None
    ece: float | None = None
    mean_err: float | None = None
    cov_err: float | None = None
    retained_samples: int = 0
    status: str = "ok"
    per_agent: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def csv_row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [fmt(getattr(self, c)) for c in CSV_COLUMNS]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)
