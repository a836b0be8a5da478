"""Random configurations for analytic-vs-central-difference gradient checks.

Each ``*_case(rng)`` draws one configuration and returns the relative error
between the autodiff gradient and :func:`~dcsreid.tensor.fd_gradient_oracle`.
"""

from __future__ import annotations

import numpy as np

from . import ib
from . import tensor as T
from .attention import masked_affinity
from .losses import LossConfig, composite_train_loss
from .search import latency_cost


def composite_loss_case(rng: np.random.Generator) -> float:
    """CE + triplet + eta * IBB, differentiated with respect to the batch features.

    Logits are a fixed linear map of the features so the CE term also depends
    on them.  The margin is large enough that the hinge is active.
    """
    P, K = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    C = P + int(rng.integers(0, 2))
    D = int(rng.integers(2, 7))
    labels = np.repeat(rng.permutation(C)[:P], K)
    n = labels.size
    W = rng.normal(size=(D, C))
    stats = ib.ClassStatistics(
        num_classes=C,
        feature_centroids=rng.normal(size=(C, D)),
        input_centroids=np.zeros((C, 1)),
        Q_table=rng.dirichlet(np.ones(C), size=C).T,
    )
    phi_X = rng.dirichlet(np.ones(C), size=n)
    cfg = LossConfig(eta=float(rng.uniform(0.5, 2.0)), smoothing=float(rng.uniform(0.0, 0.3)),
                     triplet_margin=2.0)

    def loss(F):
        return composite_train_loss(T.matmul(F, T.Tensor(W)), F, labels, stats, cfg, phi_X=phi_X)["total"]

    F0 = rng.normal(size=(n, D))
    analytic = T.grad_of(loss, F0)[0]
    numeric = T.fd_gradient_oracle(lambda f: loss(T.Tensor(f)).item(), F0)
    return T.relative_error(analytic, numeric)


def dcs_attention_case(rng: np.random.Generator) -> float:
    """DCS block output projected on a random direction, differentiated w.r.t. the mask weights.

    The forward pass uses the hard mask, so the reference is the surrogate
    whose mask is ``hard + soft(theta) - soft(theta_0)``: equal to the hard
    mask at ``theta_0`` with the soft mask's derivative, which is the
    straight-through contract.
    """
    N, C = int(rng.integers(2, 7)), int(rng.integers(2, 9))
    X = rng.normal(size=(N, C))
    b = rng.normal(0.0, 0.5, C)
    tau = float(rng.uniform(0.5, 5.0))
    noise = rng.gumbel(size=(N, C)) - rng.gumbel(size=(N, C))
    R = rng.normal(size=(N, C))
    W0 = rng.normal(0.0, 1.0, (C, C))

    def soft_of(W):
        theta = T.matmul(T.Tensor(X), W) + b
        return T.sigmoid((theta + noise) * (1.0 / tau))

    soft0 = soft_of(T.Tensor(W0)).data
    hard0 = (soft0 > 0.5).astype(np.float64)

    def output(M):
        return (T.matmul(masked_affinity(T.Tensor(X), M), T.Tensor(X)) * R).sum()

    def analytic_loss(W):
        soft = soft_of(W)
        return output(T.straight_through((soft.data > 0.5).astype(np.float64), soft))

    def surrogate(w):
        return output(T.Tensor(hard0 + soft_of(T.Tensor(w)).data - soft0)).item()

    analytic = T.grad_of(analytic_loss, W0)[0]
    numeric = T.fd_gradient_oracle(surrogate, W0)
    return T.relative_error(analytic, numeric)


def latency_cost_case(rng: np.random.Generator) -> float:
    layers = int(rng.integers(1, 5))
    sizes = [int(rng.integers(2, 4)) for _ in range(layers)]
    costs = [np.sort(rng.uniform(1.0, 100.0, k)) for k in sizes]
    flat0 = rng.normal(size=sum(sizes))
    cuts = np.cumsum(sizes)[:-1]

    def loss(v):
        parts = [T.take(v, np.arange(s, e)) for s, e in zip(np.r_[0, cuts], np.r_[cuts, len(flat0)])]
        return latency_cost(parts, costs)

    analytic = T.grad_of(loss, flat0)[0]
    numeric = T.fd_gradient_oracle(lambda v: loss(T.Tensor(v)).item(), flat0)
    return T.relative_error(analytic, numeric)
