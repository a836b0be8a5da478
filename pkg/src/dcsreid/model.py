"""Toy Re-ID backbone with attention insertion points.

Per-token layout::

    X [B, N, C_in] -> (attention on raw channels) -> stage_1 -> (attention) -> ...
      -> pool over tokens -> embedding F [B, E] -> classifier logits [B, classes]

A stage is a per-token ``Linear -> LayerNorm -> ReLU``; without the
normalisation, stacked stages with residual attention tend to collapse to a
constant embedding under batch-hard triplet training.  Attention blocks are residual:
``h + attention(h)``.  Pooling is either the token mean or the flattened
token grid; the flattened form keeps the position of each token, which is
where the synthetic datasets put their identity signal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, AttentionConfig
from .exceptions import CheckpointError, ParameterError
from .tensor import Tensor


def layer_norm(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token standardisation over channels (no affine parameters)."""
    mu = h.mean(axis=-1, keepdims=True)
    c = h - mu
    var = (c * c).mean(axis=-1, keepdims=True)
    return c / T.sqrt(var + eps)


@dataclass
class StageSpec:
    width: int
    attention: bool = True


@dataclass
class ModelSpec:
    tokens: int
    in_channels: int
    num_classes: int
    embed_dim: int = 16
    attention_mode: str = "dcs"          # dcs | vanilla | nonlocal | none
    input_attention: bool = True
    stages: list[StageSpec] = field(default_factory=list)
    qk_projection: bool = False
    pool: str = "flatten"                # flatten | mean
    stage_norm: bool = True              # layer norm before each stage's ReLU

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if self.attention_mode not in ("dcs", "vanilla", "nonlocal", "none"):
            raise ParameterError(f"unknown attention mode {self.attention_mode!r}")
        if self.pool not in ("flatten", "mean"):
            raise ParameterError(f"unknown pooling {self.pool!r}")

    def out_width(self) -> int:
        return self.stages[-1].width if self.stages else self.in_channels

    def pooled_width(self) -> int:
        return self.out_width() * (self.tokens if self.pool == "flatten" else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def attention_sites(self) -> list[tuple[str, int]]:
        """(site name, channel count) for every attention block."""
        if self.attention_mode == "none":
            return []
        sites = []
        if self.input_attention:
            sites.append(("attn_in", self.in_channels))
        for i, st in enumerate(self.stages):
            if st.attention:
                sites.append((f"attn_{i}", st.width))
        return sites


def count_parameters(spec: ModelSpec) -> int:
    """Closed-form parameter count of :class:`Network` built from ``spec``."""
    total = 0
    width = spec.in_channels
    for st in spec.stages:
        total += width * st.width + st.width
        width = st.width
    if spec.attention_mode == "dcs":
        for _, c in spec.attention_sites():
            total += c * c + c + (2 * c * c if spec.qk_projection else 0)
    pooled = width * (spec.tokens if spec.pool == "flatten" else 1)
    total += pooled * spec.embed_dim + spec.embed_dim
    total += spec.embed_dim * spec.num_classes + spec.num_classes
    return total


def _linear(rng, fan_in: int, fan_out: int, name: str) -> tuple[Tensor, Tensor]:
    w = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), name=f"{name}.w")
    b = T.parameter(np.zeros(fan_out), name=f"{name}.b")
    return w, b


class Network:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, tau_start: float = 5.0,
                 tau_end: float = 0.5):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.blocks: dict[str, AttentionBlock] = {}
        width = spec.in_channels
        sites = dict(spec.attention_sites())
        if "attn_in" in sites:
            self._add_block("attn_in", width, rng, tau_start, tau_end)
        for i, st in enumerate(spec.stages):
            w, b = _linear(rng, width, st.width, f"stage_{i}")
            self.params[w.name], self.params[b.name] = w, b
            width = st.width
            if f"attn_{i}" in sites:
                self._add_block(f"attn_{i}", width, rng, tau_start, tau_end)
        w, b = _linear(rng, spec.pooled_width(), spec.embed_dim, "embed")
        self.params[w.name], self.params[b.name] = w, b
        w, b = _linear(rng, spec.embed_dim, spec.num_classes, "classifier")
        self.params[w.name], self.params[b.name] = w, b
        self.out_width = width  # channel count entering the pooling

    def _add_block(self, name, channels, rng, tau_start, tau_end):
        cfg = AttentionConfig(mode=self.spec.attention_mode, channels=channels, tokens=self.spec.tokens,
                              tau_start=tau_start, tau_end=tau_end, qk_projection=self.spec.qk_projection)
        block = AttentionBlock(cfg, rng)
        self.blocks[name] = block
        for key, p in block.params.items():
            p.name = f"{name}.{key}"
            self.params[p.name] = p

    # -- forward ----------------------------------------------------------
    def _attend(self, name, h, tau, rng, inference):
        block = self.blocks.get(name)
        if block is None:
            return h
        return h + block(h, tau, rng, inference)

    def forward(self, x, tau: float = 1.0, rng: np.random.Generator | None = None,
                inference: bool = False, stage_gates: list | None = None) -> tuple[Tensor, Tensor]:
        """Returns ``(features, logits)``.

        ``stage_gates[i]``, if given, multiplies stage ``i``'s output channels
        (the supernet's width selection).
        """
        h = T.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, self.spec.tokens, self.spec.in_channels)
                        if not isinstance(x, Tensor) else x)
        h = self._attend("attn_in", h, tau, rng, inference)
        for i, _ in enumerate(self.spec.stages):
            z = T.matmul(h, self.params[f"stage_{i}.w"]) + self.params[f"stage_{i}.b"]
            if self.spec.stage_norm:
                z = layer_norm(z)
            h = T.relu(z)
            if stage_gates is not None and stage_gates[i] is not None:
                h = h * stage_gates[i]
            h = self._attend(f"attn_{i}", h, tau, rng, inference)
        if self.spec.pool == "mean":
            pooled = h.mean(axis=1)
        else:
            pooled = T.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        features = T.matmul(pooled, self.params["embed.w"]) + self.params["embed.b"]
        logits = T.matmul(features, self.params["classifier.w"]) + self.params["classifier.b"]
        return features, logits

    def embed(self, x, batch_size: int = 256) -> np.ndarray:
        """Deterministic (inference-mode) features as a plain array."""
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i:i + batch_size], tau=1.0, inference=True)[0].data
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.embed_dim))

    def hard_masks(self, x, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Inference-mode binary masks ``[n, N, C]`` per DCS block."""
        x = np.asarray(x, dtype=np.float64)
        masks: dict[str, list] = {name: [] for name, b in self.blocks.items() if b.config.mode == "dcs"}
        for i in range(0, len(x), batch_size):
            self.forward(x[i:i + batch_size], tau=1.0, inference=True)
            for name in masks:
                masks[name].append(self.blocks[name].last_mask.hard.copy())
        return {k: np.concatenate(v) for k, v in masks.items()}

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise CheckpointError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = arr.copy()
