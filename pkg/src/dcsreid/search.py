"""Micro differentiable architecture search over per-stage channel widths.

The supernet is a :class:`~dcsreid.model.Network` built at the widest option
of every stage.  For stage ``l`` with options ``w_1 < ... < w_K`` the stage
output is multiplied by the gate::

    gate_l = sum_k weight_k * basis_k      basis_k = 1 on the first w_k channels, else 0

where ``weight = option_mask(V_l)`` is a Gumbel-softmax sample while
searching and an argmax one-hot at inference.  The search loss on the
architecture split adds ``lambda * latency_cost(V) / reference_cost``.
Weights W take momentum-SGD steps on the weight split, V takes Adam steps on
the architecture split, and neither step ever produces gradient for the
other parameter set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ib
from . import tensor as T
from .attention import gumbel_noise, linear_anneal
from .data import IdentityDataset, sample_pk_batch
from .exceptions import ParameterError
from .losses import LossConfig, composite_train_loss
from .model import ModelSpec, Network, StageSpec
from .tensor import Tensor

TRAJECTORY_COLUMNS = ("epoch", "weight_loss", "arch_loss", "latency", "tau")


def expand_options(option: tuple[int, int, int]) -> list[int]:
    """``(low, high, step)`` to the widths ``low, low + step, ..., <= high``."""
    low, high, step = (int(v) for v in option)
    if low < 1 or step < 1 or high < low:
        raise ParameterError(f"bad width option tuple {(low, high, step)}")
    return list(range(low, high + 1, step))


@dataclass
class SuperNetSpec:
    tokens: int
    in_channels: int
    num_classes: int
    stage_options: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(8, 16, 8), (8, 24, 8), (8, 16, 8)])
    stage_attention: list[bool] | None = None     # default: DCS after every stage
    input_attention: bool = False
    embed_dim: int = 16
    pool: str = "flatten"

    def __post_init__(self):
        self.stage_options = [tuple(int(v) for v in o) for o in self.stage_options]
        if not self.stage_options:
            raise ParameterError("supernet needs at least one stage")
        if self.stage_attention is None:
            self.stage_attention = [True] * len(self.stage_options)
        if len(self.stage_attention) != len(self.stage_options):
            raise ParameterError("one attention flag per stage")
        for o in self.stage_options:
            expand_options(o)

    @property
    def options(self) -> list[list[int]]:
        return [expand_options(o) for o in self.stage_options]

    def model_spec(self, widths) -> ModelSpec:
        stages = [StageSpec(int(w), bool(a)) for w, a in zip(widths, self.stage_attention)]
        return ModelSpec(tokens=self.tokens, in_channels=self.in_channels, num_classes=self.num_classes,
                         embed_dim=self.embed_dim, attention_mode="dcs",
                         input_attention=self.input_attention, stages=stages, pool=self.pool)

    def widest(self) -> ModelSpec:
        return self.model_spec([opts[-1] for opts in self.options])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_options"] = [list(o) for o in self.stage_options]
        return d


def option_mask(logits, tau: float, rng: np.random.Generator | None = None,
                inference: bool = False) -> Tensor:
    """Simplex weights over the options of one choice.

    Training: ``softmax((logits + g) / tau)`` with Gumbel noise ``g``.
    Inference: one-hot of the argmax, first index on ties.
    """
    logits = T.as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise ParameterError("option logits must be a nonempty vector")
    if inference:
        out = np.zeros(logits.shape)
        out[int(np.argmax(logits.data))] = 1.0
        return T.Tensor(out)
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if rng is None:
        raise ParameterError("training-mode option sampling needs an rng")
    g = gumbel_noise(rng, logits.shape)
    return T.softmax_rows((logits + g) * (1.0 / tau))


def option_costs(spec: SuperNetSpec) -> list[np.ndarray]:
    """Multiply-accumulate count per width option, one array per stage.

    A stage of width ``w`` fed by ``c`` channels costs ``N (c w + w)`` for the
    linear map and, when a DCS module follows, ``N w^2`` for the mask
    projection plus ``2 N^2 w`` for affinity and aggregation.  ``c`` is the
    widest option of the previous stage, so costs do not depend on the other
    choices.
    """
    N = spec.tokens
    tables = []
    prev = spec.in_channels
    for opts, attn in zip(spec.options, spec.stage_attention):
        w = np.array(opts, dtype=np.float64)
        cost = N * (prev * w + w)
        if attn:
            cost = cost + N * w * w + 2 * N * N * w
        tables.append(cost)
        prev = opts[-1]
    return tables


def latency_cost(V, cost_table) -> Tensor:
    """``sum_l sum_k softmax(V_l)_k cost_l[k]``: expected cost, differentiable in V."""
    if len(V) != len(cost_table):
        raise ParameterError(f"{len(V)} logit vectors for {len(cost_table)} cost rows")
    total = None
    for v, c in zip(V, cost_table):
        v = T.as_tensor(v)
        c = np.asarray(c, dtype=np.float64)
        if v.shape != c.shape:
            raise ParameterError(f"logits {v.shape} and costs {c.shape} disagree")
        term = (T.softmax_rows(v) * c).sum()
        total = term if total is None else total + term
    return total


def gate_basis(options: list[int]) -> np.ndarray:
    """``[K, w_max]`` with row ``k`` = 1 on the first ``options[k]`` channels."""
    w_max = options[-1]
    return (np.arange(w_max)[None, :] < np.array(options)[:, None]).astype(np.float64)


@dataclass
class SearchConfig:
    epochs: int = 20
    P: int = 5
    K: int = 2
    weight_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    arch_lr: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    latency_weight: float = 0.1
    weight_fraction: float = 0.8
    tau_start: float = 5.0
    tau_end: float = 0.5
    eta: float = 1.0
    use_ibb: bool = True
    smoothing: float = 0.1
    margin: float = 0.0
    mask_params_as_arch: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.weight_fraction < 1:
            raise ParameterError("weight_fraction must be in (0, 1)")
        if self.latency_weight < 0 or self.weight_lr < 0 or self.arch_lr < 0:
            raise ParameterError("learning rates and latency weight must be nonnegative")
        self.adam_betas = tuple(self.adam_betas)

    def loss_config(self) -> LossConfig:
        return LossConfig(eta=self.eta, smoothing=self.smoothing, triplet_margin=self.margin,
                          use_ibb=self.use_ibb, use_triplet=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def split_train(labels, train_idx, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per identity: ``fraction`` of the training samples for weights, the rest for V.

    Each side keeps at least two samples per identity so PK batches exist.
    """
    labels = np.asarray(labels)
    w, a = [], []
    for k in np.unique(labels[train_idx]):
        idx = rng.permutation(train_idx[labels[train_idx] == k])
        if idx.size < 4:
            raise ParameterError(f"identity {k} has {idx.size} training samples; the split needs 4")
        n_w = min(max(2, int(round(fraction * idx.size))), idx.size - 2)
        w.append(idx[:n_w])
        a.append(idx[n_w:])
    return np.sort(np.concatenate(w)), np.sort(np.concatenate(a))


@dataclass
class SearchState:
    spec: SuperNetSpec
    network: Network
    V: list[Tensor]
    weight_split: np.ndarray
    arch_split: np.ndarray
    stats: ib.ClassStatistics
    velocity: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng: np.random.Generator
    steps: int = 0
    arch_steps: int = 0
    trajectory: list[dict] = field(default_factory=list)

    @property
    def arch_names(self) -> list[str]:
        return [f"V{i}" for i in range(len(self.V))]

    def arch_params(self, config: SearchConfig) -> dict[str, Tensor]:
        out = dict(zip(self.arch_names, self.V))
        if config.mask_params_as_arch:
            out.update({k: p for k, p in self.network.params.items() if ".mask_" in k})
        return out

    def weight_params(self, config: SearchConfig) -> dict[str, Tensor]:
        arch = self.arch_params(config)
        return {k: p for k, p in self.network.params.items() if k not in arch}


def init_search(spec: SuperNetSpec, ds: IdentityDataset, config: SearchConfig) -> SearchState:
    rng = np.random.default_rng(config.seed)
    net = Network(spec.widest(), rng, config.tau_start, config.tau_end)
    V = [T.parameter(np.zeros(len(opts)), name=f"V{i}") for i, opts in enumerate(spec.options)]
    w_split, a_split = split_train(ds.labels, ds.train_indices, config.weight_fraction, rng)
    C = ds.num_classes
    input_centroids = ib.update_centroids(ds.samples[w_split], ds.labels[w_split], C)
    phi_X = ib.soft_assignment(ds.samples, input_centroids).data
    state = SearchState(spec, net, V, w_split, a_split, None, {}, {}, {}, rng)
    feats = _supernet_features(state, ds, w_split)
    state.stats = ib.ClassStatistics(C, ib.update_centroids(feats, ds.labels[w_split], C),
                                     input_centroids, ib.uniform_q(C, C), phi_X=phi_X)
    params = {**dict(zip(state.arch_names, V)), **net.params}
    state.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    state.adam_m = {k: np.zeros_like(p.data) for k, p in params.items()}
    state.adam_v = {k: np.zeros_like(p.data) for k, p in params.items()}
    return state


def supernet_forward(state: SearchState, x, tau: float, rng=None, inference: bool = False):
    gates = []
    for v, opts in zip(state.V, state.spec.options):
        w = option_mask(v, tau, rng, inference)
        gates.append(T.matmul(T.reshape(w, (1, len(opts))), T.Tensor(gate_basis(opts))))
    return state.network.forward(x, tau, rng, inference, stage_gates=gates)


def _supernet_features(state: SearchState, ds: IdentityDataset, idx) -> np.ndarray:
    return supernet_forward(state, ds.grid(idx), 1.0, inference=True)[0].data


def search_loss(state: SearchState, ds: IdentityDataset, idx, config: SearchConfig, tau: float,
                which: str) -> dict:
    """Batch loss; ``"total"`` adds the latency term for architecture steps."""
    y = ds.labels[idx]
    features, logits = supernet_forward(state, ds.grid(idx), tau, state.rng)
    terms = composite_train_loss(logits, features, y, state.stats, config.loss_config(),
                                 phi_X=state.stats.phi_X[idx], rng=state.rng)
    if which == "arch":
        ref = float(sum(c.max() for c in option_costs(state.spec)))
        terms["latency"] = latency_cost(state.V, option_costs(state.spec)) * (1.0 / ref)
        if config.latency_weight:
            terms["total"] = terms["total"] + terms["latency"] * config.latency_weight
    return terms


def _set_trainable(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag
        p.grad = None


def search_step(state: SearchState, ds: IdentityDataset, batch_indices, config: SearchConfig,
                which: str, tau: float | None = None) -> dict:
    """One update of W (``which="weights"``) or V (``which="arch"``).

    The other parameter set is frozen for the forward pass, so it gets no
    gradient and is left bitwise unchanged.
    """
    if which not in ("weights", "arch"):
        raise ParameterError(f"which must be 'weights' or 'arch', got {which!r}")
    idx = np.asarray(batch_indices)
    split = state.weight_split if which == "weights" else state.arch_split
    if not np.all(np.isin(idx, split)):
        raise ParameterError(f"{which} step given samples outside the {which} split")
    tau = config.tau_start if tau is None else tau
    active = state.weight_params(config) if which == "weights" else state.arch_params(config)
    frozen = state.arch_params(config) if which == "weights" else state.weight_params(config)
    _set_trainable(frozen, False)
    _set_trainable(active, True)
    try:
        terms = search_loss(state, ds, idx, config, tau, "weights" if which == "weights" else "arch")
        T.backward(terms["total"])
    finally:
        _set_trainable(frozen, True)
    if which == "weights":
        _momentum_step(active, state.velocity, config)
        state.steps += 1
    else:
        state.arch_steps += 1
        _adam_step(active, state.adam_m, state.adam_v, state.arch_steps, config)
    return {k: v.item() for k, v in terms.items()}


def _momentum_step(params: dict[str, Tensor], velocity: dict, config: SearchConfig) -> None:
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    scale = 1.0
    if config.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
    for k, p in params.items():
        v = velocity[k]
        v *= config.momentum
        v += grads[k] * scale + config.weight_decay * p.data
        p.data = p.data - config.weight_lr * v


def _adam_step(params: dict[str, Tensor], m: dict, v: dict, t: int, config: SearchConfig) -> None:
    b1, b2 = config.adam_betas
    for k, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** t)
        v_hat = v[k] / (1 - b2 ** t)
        p.data = p.data - config.arch_lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def _num_batches(split: np.ndarray, P: int, K: int) -> int:
    return max(1, split.size // (P * K))


def search_epoch(state: SearchState, ds: IdentityDataset, config: SearchConfig, epoch: int) -> dict:
    tau = linear_anneal(epoch, config.epochs, config.tau_start, config.tau_end)
    w_losses, a_losses, lat = [], [], []
    for _ in range(_num_batches(state.weight_split, config.P, config.K)):
        wb = sample_pk_batch(ds.labels, config.P, config.K, state.rng, state.weight_split)
        w_losses.append(search_step(state, ds, wb.indices, config, "weights", tau)["total"])
        ab = sample_pk_batch(ds.labels, config.P, config.K, state.rng, state.arch_split)
        terms = search_step(state, ds, ab.indices, config, "arch", tau)
        a_losses.append(terms["total"])
        lat.append(terms["latency"])
    w_idx = state.weight_split
    C = ds.num_classes
    feats = _supernet_features(state, ds, w_idx)
    centroids = ib.update_centroids(feats, ds.labels[w_idx], C, previous=state.stats.feature_centroids)
    Q = ib.update_variational_q(ib.soft_assignment(feats, centroids).data, ds.labels[w_idx], C)
    state.stats = ib.ClassStatistics(C, centroids, state.stats.input_centroids, Q, phi_X=state.stats.phi_X)
    row = {"epoch": epoch + 1, "weight_loss": float(np.mean(w_losses)),
           "arch_loss": float(np.mean(a_losses)), "latency": float(np.mean(lat)), "tau": tau}
    for i, v in enumerate(state.V):
        p = T.softmax_array(v.data)
        row[f"entropy_{i}"] = float(-np.sum(p * np.log(p)))
    state.trajectory.append(row)
    return row


def run_search(spec: SuperNetSpec, ds: IdentityDataset, config: SearchConfig) -> SearchState:
    state = init_search(spec, ds, config)
    for epoch in range(config.epochs):
        search_epoch(state, ds, config, epoch)
    return state


def derive_architecture(V, spec: SuperNetSpec) -> ModelSpec:
    """Fixed network with the argmax width (lowest index on ties) of every stage."""
    if len(V) != len(spec.options):
        raise ParameterError(f"{len(V)} logit vectors for {len(spec.options)} stages")
    widths = []
    for v, opts in zip(V, spec.options):
        v = np.asarray(v.data if isinstance(v, Tensor) else v)
        if v.shape != (len(opts),):
            raise ParameterError(f"logit vector of shape {v.shape} for {len(opts)} options")
        widths.append(opts[int(np.argmax(v))])
    return spec.model_spec(widths)


def write_trajectory(rows: list[dict], path) -> None:
    if not rows:
        cols = list(TRAJECTORY_COLUMNS)
    else:
        cols = list(TRAJECTORY_COLUMNS) + sorted(k for k in rows[0] if k.startswith("entropy_"))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
