"""Logistic-regression adversarial detector over LID features."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import InsufficientDataError, ShapeError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    learning_rate: float = 0.1
    epochs: int = 1000
    seed: int = 0
    threshold: float = 0.5


@dataclass
class DetectorModel:
    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    threshold: float = 0.5
    # columns whose std was floored at STD_FLOOR
    degenerate_features: tuple = ()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.feature_means = np.asarray(self.feature_means, dtype=np.float64)
        self.feature_stds = np.asarray(self.feature_stds, dtype=np.float64)
        if not (self.weights.shape == self.feature_means.shape == self.feature_stds.shape):
            raise ShapeError("weights, means and stds must have equal length")
        if np.any(self.feature_stds <= 0):
            raise ValueError("feature stds must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def standardize(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != len(self.weights):
            raise ShapeError(f"feature dim {f.shape[-1]} != detector dim {len(self.weights)}")
        return (f - self.feature_means) / self.feature_stds


def _matrix(vectors) -> np.ndarray:
    rows = [np.asarray(getattr(v, "values", v), dtype=np.float64).reshape(-1) for v in vectors]
    if not rows:
        raise InsufficientDataError("no feature vectors")
    if len({len(r) for r in rows}) != 1:
        raise ShapeError("inconsistent feature dimensions")
    return np.vstack(rows)


def train_detector(pos, neg, hp: DetectorConfig = DetectorConfig()) -> DetectorModel:
    """Full-batch gradient descent on the mean logistic loss (positives = adversarial)."""
    xp, xn = _matrix(pos), _matrix(neg)
    if xp.shape[1] != xn.shape[1]:
        raise ShapeError("positive and negative features differ in dimension")
    x = np.vstack([xp, xn])
    y = np.concatenate([np.ones(len(xp)), np.zeros(len(xn))])
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    degenerate = tuple(int(j) for j in np.flatnonzero(stds < STD_FLOOR))
    if degenerate:
        logger.warning("zero-variance LID features %s; std floored at %g", degenerate, STD_FLOOR)
    stds = np.maximum(stds, STD_FLOOR)
    z = (x - means) / stds
    # zero init makes the fit independent of the seed; it is kept for interface symmetry
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(hp.epochs):
        err = expit(z @ w + b) - y
        w = w - hp.learning_rate * (z.T @ err) / n
        b = b - hp.learning_rate * err.sum() / n
    return DetectorModel(w, float(b), means, stds, hp.threshold, degenerate)


def score(model: DetectorModel, f) -> np.ndarray | float:
    """Posterior probability of being adversarial; accepts one vector or a matrix."""
    f = np.asarray(getattr(f, "values", f), dtype=np.float64)
    s = expit(model.standardize(f) @ model.weights + model.bias)
    return float(s) if np.ndim(s) == 0 else s


def score_all(model: DetectorModel, vectors) -> np.ndarray:
    return np.atleast_1d(score(model, _matrix(vectors)))


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC: P(pos > neg) with ties counted one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise InsufficientDataError("auc needs nonempty positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def detection_rate(model: DetectorModel, adv_features) -> float:
    s = score_all(model, adv_features)
    return float(np.mean(s >= model.threshold))


def tpr_at_fpr(pos_scores, neg_scores, fpr: float = 0.05) -> float:
    """True-positive rate at the smallest threshold passing at most ``fpr`` of negatives."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise InsufficientDataError("tpr_at_fpr needs nonempty scores")
    allowed = int(np.floor(fpr * neg.size))
    cut = neg[neg.size - allowed - 1]
    return float(np.mean(pos > cut))


def save_detector(model: DetectorModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "index", "value"])
        for name in ("weights", "feature_means", "feature_stds"):
            for i, v in enumerate(getattr(model, name)):
                writer.writerow([name, i, repr(float(v))])
        writer.writerow(["bias", 0, repr(float(model.bias))])
        writer.writerow(["threshold", 0, repr(float(model.threshold))])


def load_detector(path) -> DetectorModel:
    fields: dict[str, list] = {"weights": [], "feature_means": [], "feature_stds": []}
    scalars = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["field"] in fields:
                fields[row["field"]].append(float(row["value"]))
            else:
                scalars[row["field"]] = float(row["value"])
    return DetectorModel(np.array(fields["weights"]), scalars["bias"], np.array(fields["feature_means"]),
                         np.array(fields["feature_stds"]), scalars.get("threshold", 0.5))
