"""Single-query retrieval metrics: mAP and CMC / Rank-1.

No camera filtering and no re-ranking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ParameterError

SCHEMA_VERSION = 1


def euclidean_distances(query, gallery) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"query {q.shape} and gallery {g.shape} feature dims differ")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def rank_gallery(query, gallery) -> np.ndarray:
    """``[num_query, num_gallery]`` gallery indices by ascending distance; ties by index."""
    g = np.asarray(gallery)
    if g.shape[0] == 0:
        raise ParameterError("empty gallery")
    d = euclidean_distances(query, g)
    return np.argsort(d, axis=1, kind="stable")


def _matches(rankings, query_labels, gallery_labels) -> tuple[np.ndarray, np.ndarray]:
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    hits = gl[rankings] == ql[:, None]
    valid = hits.any(axis=1)
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} queries have no gallery positive; excluded",
                      RuntimeWarning, stacklevel=3)
    return hits, valid


def average_precision(hit_row: np.ndarray) -> float:
    """Mean of precision@k over the ranks k that hold a positive."""
    ranks = np.flatnonzero(hit_row) + 1
    if ranks.size == 0:
        return float("nan")
    precision = np.arange(1, ranks.size + 1) / ranks
    return float(precision.mean())


def compute_map(rankings, query_labels, gallery_labels) -> tuple[float, np.ndarray]:
    """mAP over queries with at least one positive, plus per-query AP (NaN if excluded)."""
    hits, valid = _matches(np.asarray(rankings), query_labels, gallery_labels)
    aps = np.array([average_precision(row) for row in hits])
    if not valid.any():
        return float("nan"), aps
    return float(aps[valid].mean()), aps


def compute_cmc(rankings, query_labels, gallery_labels, max_rank: int | None = None) -> np.ndarray:
    """``cmc[r - 1]`` is the fraction of queries with a positive within the top ``r``."""
    rankings = np.asarray(rankings)
    hits, valid = _matches(rankings, query_labels, gallery_labels)
    max_rank = rankings.shape[1] if max_rank is None else min(max_rank, rankings.shape[1])
    if not valid.any():
        return np.full(max_rank, np.nan)
    first = hits[valid].argmax(axis=1)
    return np.array([(first < r).mean() for r in range(1, max_rank + 1)])


@dataclass
class RankingResult:
    rankings: np.ndarray
    average_precision: np.ndarray
    mAP: float
    cmc: np.ndarray

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mAP": self.mAP,
            "rank1": self.rank1,
            "cmc": self.cmc.tolist(),
            "num_queries": int(np.sum(~np.isnan(self.average_precision))),
        }


def evaluate(query_features, query_labels, gallery_features, gallery_labels,
             max_rank: int = 10) -> RankingResult:
    rankings = rank_gallery(query_features, gallery_features)
    m, aps = compute_map(rankings, query_labels, gallery_labels)
    cmc = compute_cmc(rankings, query_labels, gallery_labels, max_rank)
    return RankingResult(rankings, aps, m, cmc)
