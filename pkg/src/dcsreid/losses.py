"""Cross-entropy, triplet and the composite training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ib
from . import tensor as T
from .exceptions import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class LossConfig:
    eta: float = 1.0
    smoothing: float = 0.1
    triplet_margin: float = 0.0
    mining: str = "batch_hard"       # or "random"
    use_ibb: bool = True
    use_triplet: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ParameterError("eta must be nonnegative")
        if not 0 <= self.smoothing < 1:
            raise ParameterError("smoothing must lie in [0, 1)")
        if self.triplet_margin < 0:
            raise ParameterError("triplet margin must be nonnegative")
        if self.mining not in ("batch_hard", "random"):
            raise ParameterError(f"unknown mining mode {self.mining!r}")


def cross_entropy_smoothed(logits, labels, smoothing: float = 0.1) -> Tensor:
    """Mean cross-entropy against ``(1 - s) onehot + s / C``."""
    logits = T.as_tensor(logits)
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {n} logit rows")
    if y.min() < 0 or y.max() >= c:
        raise ParameterError(f"label out of range [0, {c})")
    if not 0 <= smoothing < 1:
        raise ParameterError("smoothing must lie in [0, 1)")
    target = np.full((n, c), smoothing / c)
    target[np.arange(n), y] += 1.0 - smoothing
    return -(T.log_softmax_rows(logits) * target).sum() * (1.0 / n)


def triplet_loss(anchor, positive, negative, margin: float = 0.0) -> Tensor:
    """Mean of ``max(||a - p|| - ||a - n|| + margin, 0)``; works on single vectors or rows."""
    a, p, q = T.as_tensor(anchor), T.as_tensor(positive), T.as_tensor(negative)
    if not (a.shape == p.shape == q.shape):
        raise DimensionError(f"triplet shapes differ: {a.shape}, {p.shape}, {q.shape}")
    hinge = T.relu(T.norm(a - p) - T.norm(a - q) + margin)
    return hinge.mean()


def pairwise_distances(features) -> Tensor:
    F = T.as_tensor(features)
    n, d = F.shape
    return T.norm(F.reshape(n, 1, d) - F.reshape(1, n, d), axis=2)


def mine_triplets(dist: np.ndarray, labels, mode: str = "batch_hard",
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the positive and negative partner for every anchor.

    ``batch_hard``: farthest same-label sample and nearest other-label sample.
    ``random``: uniform choices within each set.
    """
    y = np.asarray(labels)
    n = y.size
    same = y[:, None] == y[None, :]
    pos_ok = same & ~np.eye(n, dtype=bool)
    neg_ok = ~same
    if not pos_ok.any(axis=1).all() or not neg_ok.any(axis=1).all():
        raise ParameterError("every anchor needs a positive and a negative in the batch")
    if mode == "batch_hard":
        pos = np.where(pos_ok, dist, -np.inf).argmax(axis=1)
        neg = np.where(neg_ok, dist, np.inf).argmin(axis=1)
    elif mode == "random":
        if rng is None:
            raise ParameterError("random mining needs an rng")
        pos = np.array([rng.choice(np.flatnonzero(r)) for r in pos_ok])
        neg = np.array([rng.choice(np.flatnonzero(r)) for r in neg_ok])
    else:
        raise ParameterError(f"unknown mining mode {mode!r}")
    return pos, neg


def batch_triplet_loss(features, labels, margin: float = 0.0, mode: str = "batch_hard",
                       rng: np.random.Generator | None = None) -> Tensor:
    D = pairwise_distances(features)
    pos, neg = mine_triplets(D.data, labels, mode, rng)
    rows = np.arange(len(pos))
    return T.relu(D[rows, pos] - D[rows, neg] + margin).mean()


def composite_train_loss(logits, features, labels, stats: ib.ClassStatistics | None,
                         config: LossConfig, phi_X=None, inputs=None,
                         rng: np.random.Generator | None = None) -> dict:
    """``CE + Triplet + eta * IBB`` on one batch.

    ``stats`` must hold the previous epoch's Q table and feature centroids.
    Input assignments come from ``phi_X`` or, failing that, from ``inputs``
    against ``stats.input_centroids``.  Returns every term plus ``"total"``.
    """
    terms: dict[str, Tensor] = {"ce": cross_entropy_smoothed(logits, labels, config.smoothing)}
    total = terms["ce"]
    if config.use_triplet:
        terms["triplet"] = batch_triplet_loss(features, labels, config.triplet_margin, config.mining, rng)
        total = total + terms["triplet"]
    if config.use_ibb:
        if stats is None:
            raise ParameterError("the IBB term needs class statistics")
        terms["ibb"] = ib.ibb_minibatch(features, inputs, labels, stats.feature_centroids,
                                        stats.input_centroids, stats.Q_table, phi_X=phi_X)
        if config.eta != 0:
            total = total + terms["ibb"] * config.eta
    terms["total"] = total
    return terms
