"""Maximum-likelihood LID estimates over layer-wise network representations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from . import nn
from .errors import DegenerateNeighborhoodError, DuplicatePointError, InsufficientDataError, ShapeError

LABELS = ("clean", "noisy", "adversarial")


@dataclass(frozen=True)
class LIDConfig:
    k: int = 20
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.batch_size < self.k + 1:
            raise ValueError("batch_size must be at least k + 1")


@dataclass
class LIDFeatureVector:
    values: np.ndarray
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")


@dataclass
class FeatureExtraction:
    vectors: list = field(default_factory=list)
    kept: list = field(default_factory=list)  # query indices that produced a vector
    dropped: int = 0


def lid_mle(distances) -> float:
    """LID estimate from the ascending distances to the k nearest neighbours.

    All k terms enter the mean, including the zero ``log(r_k / r_k)``.
    """
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise InsufficientDataError("no distances given")
    if np.any(d <= 0):
        raise DuplicatePointError("zero distance to a neighbour")
    mean_log = np.mean(np.log(d / d.max()))
    if mean_log == 0.0:
        raise DegenerateNeighborhoodError("all neighbour distances are equal")
    return float(-1.0 / mean_log)


def _flat(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)


def _k_smallest(row: np.ndarray, k: int) -> np.ndarray:
    # stable full sort keeps tied distances in reference order
    return np.sort(row, kind="stable")[:k]


def knn_distances(query, references, k: int, exclude_index: int | None = None) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    refs = _flat(references) if len(references) else np.empty((0, q.shape[1]))
    if refs.shape[1] != q.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != reference dim {refs.shape[1]}")
    available = len(refs) - (exclude_index is not None)
    if available < k:
        raise InsufficientDataError(f"need {k} references, have {available}")
    dist = cdist(q, refs)[0]
    if exclude_index is not None:
        dist = np.delete(dist, exclude_index)
    return _k_smallest(dist, k)


def make_noisy(x, target_l2: float, box=(0.0, 1.0), seed: int = 0) -> np.ndarray:
    """Add Gaussian noise of exact L2 norm ``target_l2``, then clamp to the box."""
    if target_l2 <= 0:
        raise ValueError("target_l2 must be positive")
    x = np.asarray(x, dtype=np.float64)
    noise = np.random.default_rng(seed).standard_normal(x.shape)
    noise *= target_l2 / np.linalg.norm(noise)
    return np.clip(x + noise, box[0], box[1])


def extract_features(net, clean_batch, queries, cfg: LIDConfig = LIDConfig()) -> FeatureExtraction:
    """Per-layer LID of each query against the clean reference batch.

    ``queries`` holds ``(x, label)`` or ``(x, label, counterpart_index)``; the
    counterpart (the query's own clean image inside ``clean_batch``) is excluded
    from its neighbourhood. Queries with a degenerate neighbourhood in any layer
    are dropped and counted.
    """
    clean = _flat(clean_batch)
    if len(clean) != cfg.batch_size:
        raise ShapeError(f"clean batch has {len(clean)} samples, config expects {cfg.batch_size}")
    if not queries:
        return FeatureExtraction()
    xs = _flat(np.stack([np.asarray(q[0], dtype=np.float64).reshape(-1) for q in queries]))
    labels = [q[1] for q in queries]
    excl = [q[2] if len(q) > 2 else None for q in queries]

    ref_trace = nn.forward(net, clean).per_layer
    q_trace = nn.forward(net, xs).per_layer
    lids = np.empty((len(queries), net.n_layers))
    bad = np.zeros(len(queries), dtype=bool)
    for layer, (r_act, q_act) in enumerate(zip(ref_trace, q_trace)):
        dist = cdist(q_act, r_act)
        for i in range(len(queries)):
            if bad[i]:
                continue
            row = dist[i] if excl[i] is None else np.delete(dist[i], excl[i])
            try:
                lids[i, layer] = lid_mle(_k_smallest(row, cfg.k))
            except (DegenerateNeighborhoodError, DuplicatePointError):
                bad[i] = True
    out = FeatureExtraction(dropped=int(bad.sum()))
    for i in np.flatnonzero(~bad):
        out.vectors.append(LIDFeatureVector(lids[i].copy(), labels[i]))
        out.kept.append(int(i))
    return out


def write_features_csv(vectors, path, sample_ids=None) -> None:
    ids = range(len(vectors)) if sample_ids is None else sample_ids
    n_layers = len(vectors[0].values) if vectors else 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"] + [f"lid_layer_{j}" for j in range(n_layers)])
        for sid, v in zip(ids, vectors):
            writer.writerow([sid, v.label] + [repr(float(x)) for x in v.values])


def read_features_csv(path):
    """Return ``(sample_ids, vectors)``."""
    ids, vectors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(int(row[0]))
            vectors.append(LIDFeatureVector(np.array([float(x) for x in row[2:]]), row[1]))
    return ids, vectors
