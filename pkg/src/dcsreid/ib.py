"""Information bottleneck loss and its per-sample variational bound.

Features are discretised by soft assignment to class centroids::

    phi(F_i, a) = softmax_a(-||F_i - C_a||^2)

Joint tables are averages over samples, e.g. ``P(F in a, X in b) =
mean_i phi(F_i, a) phi(X_i, b)``.  From those, ``IB = I(F, X) - I(F, Y)``.

``ibb_loss`` is the separable surrogate that is added to the training loss.
It equals the two-lemma bound (``lemma1_rhs - lemma2_rhs``) minus the
W-independent term returned by :func:`input_cross_term`; see
:func:`ibb_bound` for the version that keeps that term.

Class labels are 0-based integers in ``[0, num_classes)``.  Cluster counts
for features, inputs and labels are all equal to ``num_classes``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, DivergenceError, ParameterError
from .tensor import Tensor

Q_FLOOR = 1e-12


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _labels(labels, num_classes: int | None = None) -> tuple[np.ndarray, int]:
    y = np.asarray(labels, dtype=np.int64).ravel()
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y, num_classes


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``x * log(y)`` with ``0 * log(anything) = 0``."""
    out = np.zeros(np.broadcast(x, y).shape)
    x_b, y_b = np.broadcast_arrays(x, y)
    nz = x_b != 0
    with np.errstate(divide="ignore"):
        out[nz] = x_b[nz] * np.log(y_b[nz])
    return out


def soft_assignment(features, centroids) -> Tensor:
    """Row ``i`` is the softmax over ``a`` of ``-||F_i - C_a||^2``."""
    F, C = T.as_tensor(features), T.as_tensor(centroids)
    if C.ndim != 2 or C.shape[0] == 0:
        raise ParameterError("soft assignment needs at least one centroid")
    if F.ndim != 2 or F.shape[1] != C.shape[1]:
        raise DimensionError(f"feature shape {F.shape} does not match centroid shape {C.shape}")
    n, d = F.shape
    diff = F.reshape(n, 1, d) - C
    sq = (diff * diff).sum(axis=2)
    return T.softmax_rows(-sq)


def mutual_information(joint) -> float:
    """Mutual information of a 2-D joint probability table (nats)."""
    j = _data(joint)
    pa = j.sum(axis=1, keepdims=True)
    pb = j.sum(axis=0, keepdims=True)
    nz = j > 0
    # logs taken separately: pa * pb can underflow to 0 while j stays positive
    la = np.log(np.broadcast_to(pa, j.shape)[nz])
    lb = np.log(np.broadcast_to(pb, j.shape)[nz])
    return float(np.sum(j[nz] * (np.log(j[nz]) - la - lb)))


def joint_FX(phi_F, phi_X) -> np.ndarray:
    pf, px = _data(phi_F), _data(phi_X)
    return pf.T @ px / pf.shape[0]


def joint_FY(phi_F, labels, num_classes: int | None = None) -> np.ndarray:
    pf = _data(phi_F)
    y, C = _labels(labels, num_classes if num_classes is not None else pf.shape[1])
    onehot = np.eye(C)[y]
    return pf.T @ onehot / pf.shape[0]


def mutual_information_FX(phi_F, phi_X) -> float:
    return mutual_information(joint_FX(phi_F, phi_X))


def mutual_information_FY(phi_F, labels, num_classes: int | None = None) -> float:
    return mutual_information(joint_FY(phi_F, labels, num_classes))


def ib_loss(phi_F, phi_X, labels, num_classes: int | None = None) -> float:
    return mutual_information_FX(phi_F, phi_X) - mutual_information_FY(phi_F, labels, num_classes)


def _log_q(Q: np.ndarray, mass: np.ndarray, floor: float | None) -> np.ndarray:
    if np.any(~np.isfinite(Q)) or np.any(Q < 0):
        raise ParameterError("Q table must be finite and nonnegative")
    if floor is None:
        bad = (Q <= 0) & (mass > 0)
        if np.any(bad):
            a, y = np.argwhere(bad)[0]
            raise DivergenceError(f"Q[{a}, {y}] is zero where the assignment mass is positive")
        with np.errstate(divide="ignore"):
            return np.where(Q > 0, np.log(np.where(Q > 0, Q, 1.0)), 0.0)
    return np.log(np.maximum(Q, floor))


def ibb_per_sample(phi_F, phi_X, labels, Q_table, floor: float | None = Q_FLOOR) -> Tensor:
    """Per-sample contributions whose mean is :func:`ibb_loss`."""
    pf = T.as_tensor(phi_F)
    px = _data(phi_X)
    Q = _data(Q_table)
    y, C = _labels(labels, Q.shape[1])
    if pf.shape[1] != Q.shape[0]:
        raise DimensionError(f"phi_F has {pf.shape[1]} clusters but Q has {Q.shape[0]} rows")
    neg_entropy = _xlogy(px, px).sum(axis=1, keepdims=True)       # sum_b phi log phi
    first = (pf * neg_entropy).sum(axis=1)
    mass = pf.data.T @ np.eye(C)[y]
    logq = _log_q(Q, mass, floor)[:, y].T                           # [n, A]: log Q(a | y_i)
    second = (pf * logq).sum(axis=1)
    return first - second


def ibb_loss(phi_F, phi_X, labels, Q_table, floor: float | None = Q_FLOOR) -> Tensor:
    """Separable bound term; differentiable through ``phi_F``.

    ``floor=None`` makes zero Q entries under positive mass an error instead
    of flooring them.
    """
    return ibb_per_sample(phi_F, phi_X, labels, Q_table, floor).mean()


def input_cross_term(phi_X) -> float:
    """``-(1/n^2) sum_{i,j,b} phi(X_i,b) log phi(X_j,b)``; nonnegative, constant in W."""
    px = _data(phi_X)
    p_b = px.mean(axis=0)
    used = p_b > 0
    with np.errstate(divide="ignore"):
        mean_log = np.log(px[:, used]).mean(axis=0)
    return float(-np.sum(p_b[used] * mean_log))


def ibb_bound(phi_F, phi_X, labels, Q_table, floor: float | None = Q_FLOOR) -> float:
    """``ibb_loss`` plus :func:`input_cross_term`: the sum of both lemma bounds."""
    return float(ibb_loss(phi_F, phi_X, labels, Q_table, floor).item()) + input_cross_term(phi_X)


def ibb_minibatch(features, inputs, labels, feature_centroids, input_centroids, Q_prev,
                  floor: float | None = Q_FLOOR, phi_X=None) -> Tensor:
    """Bound on one batch; ``phi`` recomputed from current features and fixed centroids.

    ``inputs`` are flattened raw samples; pass a precomputed ``phi_X`` to skip
    the input assignment.
    """
    phi_F = soft_assignment(features, T.Tensor(_data(feature_centroids)))
    if phi_X is None:
        phi_X = soft_assignment(_data(inputs), _data(input_centroids)).data
    return ibb_loss(phi_F, phi_X, labels, Q_prev, floor)


def update_variational_q(phi_F, labels, num_classes: int | None = None) -> np.ndarray:
    """``Q[a, y] = mean of phi(F_i, a) over samples with label y``; column-stochastic.

    A class with no samples gets a uniform column and a warning.
    """
    pf = _data(phi_F)
    A = pf.shape[1]
    y, C = _labels(labels, num_classes if num_classes is not None else A)
    onehot = np.eye(C)[y]
    counts = onehot.sum(axis=0)
    Q = np.full((A, C), 1.0 / A)
    present = counts > 0
    Q[:, present] = (pf.T @ onehot)[:, present] / counts[present]
    if not np.all(present):
        warnings.warn(f"empty classes {np.flatnonzero(~present).tolist()}: Q columns set uniform",
                      RuntimeWarning, stacklevel=2)
    return Q


def update_centroids(features, labels, num_classes: int, previous=None) -> np.ndarray:
    """Per-class mean; an empty class keeps its previous centroid (or zeros) with a warning."""
    f = _data(features)
    y, C = _labels(labels, num_classes)
    onehot = np.eye(C)[y]
    counts = onehot.sum(axis=0)
    present = counts > 0
    out = np.zeros((C, f.shape[1])) if previous is None else np.array(_data(previous), copy=True)
    out[present] = (onehot.T @ f)[present] / counts[present, None]
    if not np.all(present):
        warnings.warn(f"empty classes {np.flatnonzero(~present).tolist()}: centroids carried over",
                      RuntimeWarning, stacklevel=2)
    return out


def lemma1_rhs(phi_F, phi_X) -> float:
    pf, px = _data(phi_F), _data(phi_X)
    first = float((pf * _xlogy(px, px).sum(axis=1, keepdims=True)).sum() / pf.shape[0])
    return first + input_cross_term(px)


def lemma1_gap(phi_F, phi_X) -> float:
    """Upper bound on I(F, X) minus I(F, X); never negative."""
    return lemma1_rhs(phi_F, phi_X) - mutual_information_FX(phi_F, phi_X)


def lemma2_rhs(phi_F, labels, Q_table, floor: float | None = Q_FLOOR) -> float:
    pf = _data(phi_F)
    Q = _data(Q_table)
    y, C = _labels(labels, Q.shape[1])
    mass = pf.T @ np.eye(C)[y]
    return float(np.sum(mass * _log_q(Q, mass, floor)) / pf.shape[0])


def lemma2_gap(phi_F, labels, Q_table, floor: float | None = Q_FLOOR) -> float:
    """I(F, Y) minus its variational lower bound; never negative."""
    Q = _data(Q_table)
    return mutual_information_FY(phi_F, labels, Q.shape[1]) - lemma2_rhs(phi_F, labels, Q, floor)


def uniform_q(num_clusters: int, num_classes: int) -> np.ndarray:
    return np.full((num_clusters, num_classes), 1.0 / num_clusters)


@dataclass
class ClassStatistics:
    num_classes: int
    feature_centroids: np.ndarray
    input_centroids: np.ndarray
    Q_table: np.ndarray
    phi_F: np.ndarray | None = field(default=None, repr=False)
    phi_X: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {
            "num_classes": self.num_classes,
            "feature_centroids": self.feature_centroids.tolist(),
            "input_centroids": self.input_centroids.tolist(),
            "Q_table": self.Q_table.tolist(),
        }
        for key in ("phi_F", "phi_X"):
            value = getattr(self, key)
            out[key] = None if value is None else value.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ClassStatistics":
        def arr(v):
            return None if v is None else np.array(v, dtype=np.float64)

        return cls(num_classes=int(d["num_classes"]),
                   feature_centroids=arr(d["feature_centroids"]),
                   input_centroids=arr(d["input_centroids"]),
                   Q_table=arr(d["Q_table"]),
                   phi_F=arr(d.get("phi_F")), phi_X=arr(d.get("phi_X")))
