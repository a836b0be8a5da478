"""Self-attention blocks: vanilla, simplified non-local, and DCS.

DCS attention computes its affinity on a per-token binary subset of channels::

    theta = X W + b                                  (mask projection)
    soft  = sigmoid((theta + g1 - g2) / tau)         g1, g2 ~ Gumbel(0, 1)
    hard  = soft > 0.5
    A     = softmax_rows((X * M)(X * M)^T)           M = hard forward, soft backward
    out   = A X

At inference the Gumbel noise is zero, so the block is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, ParameterError
from .tensor import Tensor

MODES = ("vanilla", "nonlocal", "dcs")


def vanilla_attention(Q, K, V) -> Tensor:
    """``softmax(Q K^T / sqrt(D)) V``."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if not (Q.shape == K.shape and K.shape[:-1] == V.shape[:-1]):
        raise DimensionError(f"attention shapes mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    scale = 1.0 / np.sqrt(Q.shape[-1])
    A = T.softmax_rows(T.matmul(Q, T.transpose(K)) * scale)
    return T.matmul(A, V)


def nonlocal_attention(X) -> Tensor:
    """``X X^T X / N`` where N counts the token positions."""
    X = T.as_tensor(X)
    n = X.shape[-2]
    if n < 1:
        raise DimensionError("non-local attention needs at least one token")
    return T.matmul(T.matmul(X, T.transpose(X)), X) * (1.0 / n)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # u == 0 has probability ~2^-53 but would give inf
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def sample_soft_mask(theta, tau: float, rng: np.random.Generator | None = None,
                     inference: bool = False) -> Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    theta = T.as_tensor(theta)
    if inference:
        logits = theta
    else:
        if rng is None:
            raise ParameterError("training-mode mask sampling needs an rng")
        noise = gumbel_noise(rng, theta.shape) - gumbel_noise(rng, theta.shape)
        logits = theta + noise
    return T.sigmoid(logits * (1.0 / tau))


@dataclass
class DecisionMask:
    soft: Tensor
    hard: np.ndarray
    tau: float

    @property
    def mask(self) -> Tensor:
        """Forward value equal to ``hard``; gradients reach ``soft``."""
        return T.straight_through(self.hard, self.soft)


def binarize_mask(soft, tau: float = 1.0) -> DecisionMask:
    soft = T.as_tensor(soft)
    hard = (soft.data > 0.5).astype(np.float64)
    return DecisionMask(soft=soft, hard=hard, tau=tau)


def masked_affinity(X, M) -> Tensor:
    """``softmax_rows((X * M)(X * M)^T)``."""
    Xm = T.mul(X, M)
    return T.softmax_rows(T.matmul(Xm, T.transpose(Xm)))


def linear_anneal(step: int, total: int, start: float, end: float) -> float:
    """Linear interpolation from ``start`` (step 0) to ``end`` (step ``total - 1``)."""
    if total <= 1:
        return float(start)
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return float(start + (end - start) * frac)


@dataclass
class AttentionConfig:
    mode: str = "dcs"
    channels: int = 8
    tokens: int = 4
    tau_start: float = 5.0
    tau_end: float = 0.5
    inference: bool = False
    qk_projection: bool = False
    mask_bias_init: float = 0.5
    mask_weight_std: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown attention mode {self.mode!r}; expected one of {MODES}")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ParameterError("temperatures must be positive")
        if self.channels < 1 or self.tokens < 1:
            raise ParameterError("channels and tokens must be positive")


class AttentionBlock:
    """One attention module with its own parameters.

    Accepts ``[N, C]`` or batched ``[B, N, C]`` inputs; the mask projection is
    applied row-wise so it does not depend on N.
    """

    def __init__(self, config: AttentionConfig, rng: np.random.Generator):
        self.config = config
        c = config.channels
        self.params: dict[str, Tensor] = {}
        if config.mode == "dcs":
            self.params["mask_w"] = T.parameter(rng.normal(0.0, config.mask_weight_std, (c, c)))
            self.params["mask_b"] = T.parameter(np.full(c, config.mask_bias_init))
            if config.qk_projection:
                self.params["wq"] = T.parameter(np.eye(c) + rng.normal(0, 0.01, (c, c)))
                self.params["wk"] = T.parameter(np.eye(c) + rng.normal(0, 0.01, (c, c)))
        self.last_mask: DecisionMask | None = None

    def mask_logits(self, X) -> Tensor:
        return T.matmul(X, self.params["mask_w"]) + self.params["mask_b"]

    def __call__(self, X, tau: float, rng: np.random.Generator | None = None,
                 inference: bool | None = None, hard_override: np.ndarray | None = None) -> Tensor:
        X = T.as_tensor(X)
        if X.shape[-1] != self.config.channels:
            raise DimensionError(
                f"input has {X.shape[-1]} channels, block expects {self.config.channels}")
        if inference is None:
            inference = self.config.inference
        mode = self.config.mode
        if mode == "vanilla":
            return vanilla_attention(X, X, X)
        if mode == "nonlocal":
            return nonlocal_attention(X)
        soft = sample_soft_mask(self.mask_logits(X), tau, rng, inference)
        dm = binarize_mask(soft, tau)
        if hard_override is not None:
            dm = DecisionMask(soft=soft, hard=np.broadcast_to(hard_override, soft.shape).astype(np.float64), tau=tau)
        self.last_mask = dm
        M = dm.mask
        if self.config.qk_projection:
            q = T.mul(T.matmul(X, self.params["wq"]), M)
            k = T.mul(T.matmul(X, self.params["wk"]), M)
            A = T.softmax_rows(T.matmul(q, T.transpose(k)))
        else:
            A = masked_affinity(X, M)
        return T.matmul(A, X)


def dcs_attention(X, config: AttentionConfig, rng: np.random.Generator | None,
                  block: AttentionBlock | None = None, tau: float | None = None) -> Tensor:
    """Functional entry point: run a DCS block (built from ``config`` if not given)."""
    if config.mode != "dcs":
        raise ParameterError(f"dcs_attention needs mode 'dcs', got {config.mode!r}")
    if block is None:
        block = AttentionBlock(config, rng if rng is not None else np.random.default_rng(0))
    return block(X, tau if tau is not None else config.tau_start, rng, config.inference)
