"""Epoch loop with per-batch composite loss and end-of-epoch statistics refresh.

One epoch::

    for each PK batch:
        phi(F_i, a) from current features against last epoch's centroids
        loss = CE + triplet + eta * IBB(Q from last epoch)
        momentum SGD step
    features of all training samples -> new centroids -> new Q

Before the first epoch the centroids come from the randomly initialised
network and Q is uniform.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ib
from . import tensor as T
from .attention import linear_anneal
from .data import IdentityDataset, epoch_batches, eval_indices
from .evaluation import evaluate
from .exceptions import CheckpointError, DivergenceError, ParameterError
from .losses import LossConfig, composite_train_loss
from .model import ModelSpec, Network, StageSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dcsreid-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "ce", "triplet", "ibb", "ib", "map", "rank1", "tau", "lr")


@dataclass
class TrainConfig:
    epochs: int = 60
    P: int = 5
    K: int = 4
    lr: float = 0.05
    milestones: tuple[int, ...] | None = None   # None: half and five sixths of epochs
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0          # global gradient-norm cap; 0 disables
    eta: float = 1.0
    use_ibb: bool = True
    use_triplet: bool = True
    smoothing: float = 0.1
    margin: float = 0.0
    mining: str = "batch_hard"
    tau_start: float = 5.0
    tau_end: float = 0.5
    seed: int = 0
    probe_fraction: float = 0.25
    full_phi_refresh: bool = False
    eval_every: int = 1
    # backbone
    attention_mode: str = "dcs"
    input_attention: bool = True
    stage_widths: tuple[int, ...] = ()
    stage_attention: bool = True
    embed_dim: int = 16
    pool: str = "flatten"

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be nonnegative")
        if self.milestones is None:
            self.milestones = (self.epochs // 2, (5 * self.epochs) // 6) if self.epochs >= 6 else ()
        self.milestones = tuple(int(m) for m in self.milestones)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ParameterError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ParameterError(f"milestones {self.milestones} must be < epochs={self.epochs}")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("lr and weight decay must be >= 0, momentum in [0, 1)")
        if not 0 < self.probe_fraction <= 1:
            raise ParameterError("probe_fraction must be in (0, 1]")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ParameterError("temperatures must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(eta=self.eta, smoothing=self.smoothing, triplet_margin=self.margin,
                          mining=self.mining, use_ibb=self.use_ibb, use_triplet=self.use_triplet)

    def model_spec(self, ds: IdentityDataset) -> ModelSpec:
        stages = [StageSpec(w, self.stage_attention) for w in self.stage_widths]
        return ModelSpec(tokens=ds.tokens, in_channels=ds.channels, num_classes=ds.num_classes,
                         embed_dim=self.embed_dim, attention_mode=self.attention_mode,
                         input_attention=self.input_attention, stages=stages, pool=self.pool)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)

    def tau_at(self, epoch: int) -> float:
        return linear_anneal(epoch, self.epochs, self.tau_start, self.tau_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    epoch: int                      # completed epochs
    network: Network
    stats: ib.ClassStatistics       # phi_X covers every dataset sample
    velocity: dict[str, np.ndarray]
    rng: np.random.Generator
    probe: np.ndarray               # fixed training indices for IB / IBB logging
    history: list[dict] = field(default_factory=list)


def _features(net: Network, ds: IdentityDataset, idx) -> np.ndarray:
    return net.embed(ds.grid(idx))


def init_state(config: TrainConfig, ds: IdentityDataset, spec: ModelSpec | None = None) -> TrainState:
    rng = np.random.default_rng(config.seed)
    spec = spec if spec is not None else config.model_spec(ds)
    net = Network(spec, rng, config.tau_start, config.tau_end)
    tr = ds.train_indices
    C = ds.num_classes
    input_centroids = ib.update_centroids(ds.samples[tr], ds.labels[tr], C)
    phi_X = ib.soft_assignment(ds.samples, input_centroids).data
    feature_centroids = ib.update_centroids(_features(net, ds, tr), ds.labels[tr], C)
    stats = ib.ClassStatistics(C, feature_centroids, input_centroids, ib.uniform_q(C, C), phi_X=phi_X)
    n_probe = max(1, int(round(config.probe_fraction * tr.size)))
    probe = np.sort(rng.choice(tr, n_probe, replace=False))
    velocity = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    return TrainState(0, net, stats, velocity, rng, probe)


def sgd_step(net: Network, velocity: dict, lr: float, momentum: float, weight_decay: float,
             grad_clip: float = 0.0) -> None:
    """``v = m v + (g + wd w);  w -= lr v``; parameters the loss did not reach get g = 0.

    With ``grad_clip > 0`` the gradients are rescaled so their global norm is
    at most ``grad_clip`` (weight decay is applied after clipping).
    """
    scale = 1.0
    if grad_clip > 0:
        total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in net.params.values()
                              if p.grad is not None))
        if total > grad_clip:
            scale = grad_clip / total
    for k, p in net.params.items():
        g = p.grad * scale if p.grad is not None else 0.0
        v = velocity[k]
        v *= momentum
        v += g + weight_decay * p.data
        p.data = p.data - lr * v


def probe_objectives(net: Network, ds: IdentityDataset, state: TrainState,
                     centroids: np.ndarray, Q_prev: np.ndarray) -> tuple[float, float, float]:
    """(IB, IBB, IBB + input cross term) on the probe set; IBB uses the previous epoch's Q."""
    idx = state.probe
    phi_F = ib.soft_assignment(_features(net, ds, idx), centroids).data
    phi_X = state.stats.phi_X[idx]
    y = ds.labels[idx]
    C = ds.num_classes
    ib_value = ib.ib_loss(phi_F, phi_X, y, C)
    ibb_value = float(ib.ibb_loss(phi_F, phi_X, y, Q_prev).item())
    return ib_value, ibb_value, ibb_value + ib.input_cross_term(phi_X)


def retrieval_metrics(net: Network, ds: IdentityDataset) -> dict:
    q, g = eval_indices(ds)
    res = evaluate(_features(net, ds, q), ds.labels[q], _features(net, ds, g), ds.labels[g])
    return {"map": res.mAP, "rank1": res.rank1}


def _abort(state, config, diagnostic_path, message):
    if diagnostic_path is not None:
        checkpoint_save(state, config, diagnostic_path)
        message += f"; state saved to {diagnostic_path}"
    raise DivergenceError(message)


def train_epoch(state: TrainState, ds: IdentityDataset, config: TrainConfig,
                diagnostic_path=None) -> TrainState:
    net, stats, rng = state.network, state.stats, state.rng
    t = state.epoch
    lr, tau = config.lr_at(t), config.tau_at(t)
    loss_cfg = config.loss_config()
    tr = ds.train_indices
    sums = {"ce": 0.0, "triplet": 0.0, "batch_ibb": 0.0}
    batches = epoch_batches(ds.labels, config.P, config.K, rng, tr)
    for batch in batches:
        idx = batch.indices
        y = ds.labels[idx]
        features, logits = net.forward(ds.grid(idx), tau, rng, inference=False)
        terms = composite_train_loss(logits, features, y, stats, loss_cfg,
                                     phi_X=stats.phi_X[idx], rng=rng)
        total = terms["total"]
        if not math.isfinite(total.item()):
            _abort(state, config, diagnostic_path, f"non-finite loss {total.item()} at epoch {t + 1}")
        T.backward(total)
        sgd_step(net, state.velocity, lr, config.momentum, config.weight_decay, config.grad_clip)
        sums["ce"] += terms["ce"].item()
        sums["triplet"] += terms["triplet"].item() if "triplet" in terms else 0.0
        sums["batch_ibb"] += terms["ibb"].item() if "ibb" in terms else 0.0
        if config.full_phi_refresh:
            stats.phi_F = ib.soft_assignment(_features(net, ds, tr), stats.feature_centroids).data

    # end of epoch: centroids first, then Q from phi against the new centroids
    if not all(np.all(np.isfinite(p.data)) for p in net.params.values()):
        _abort(state, config, diagnostic_path, f"non-finite weights after epoch {t + 1}")
    f_train = _features(net, ds, tr)
    if not np.all(np.isfinite(f_train)):
        _abort(state, config, diagnostic_path, f"non-finite features after epoch {t + 1}")
    y_train = ds.labels[tr]
    C = ds.num_classes
    centroids = ib.update_centroids(f_train, y_train, C, previous=stats.feature_centroids)
    phi_F = ib.soft_assignment(f_train, centroids).data
    if not np.all(np.isfinite(phi_F)):
        _abort(state, config, diagnostic_path, f"non-finite soft assignments after epoch {t + 1}")
    Q_new = ib.update_variational_q(phi_F, y_train, C)
    ib_value, ibb_value, bound_value = probe_objectives(net, ds, state, centroids, stats.Q_table)
    state.stats = ib.ClassStatistics(C, centroids, stats.input_centroids, Q_new,
                                     phi_F=phi_F, phi_X=stats.phi_X)
    state.epoch = t + 1
    row = {"epoch": state.epoch,
           "ce": sums["ce"] / len(batches), "triplet": sums["triplet"] / len(batches),
           "ibb": ibb_value, "ib": ib_value, "map": float("nan"), "rank1": float("nan"),
           "tau": tau, "lr": lr, "batch_ibb": sums["batch_ibb"] / len(batches),
           "ibb_with_constant": bound_value}
    if config.eval_every and (state.epoch % config.eval_every == 0 or state.epoch == config.epochs):
        row.update(retrieval_metrics(net, ds))
    state.history.append(row)
    log.debug("epoch %d ce=%.4f ibb=%.4f ib=%.4f map=%.4f", row["epoch"], row["ce"], row["ibb"],
              row["ib"], row["map"])
    return state


def fit(config: TrainConfig, ds: IdentityDataset, spec: ModelSpec | None = None,
        state: TrainState | None = None, diagnostic_path=None) -> TrainState:
    """Train up to ``config.epochs`` completed epochs (resuming from ``state`` if given)."""
    if state is None:
        state = init_state(config, ds, spec)
    while state.epoch < config.epochs:
        train_epoch(state, ds, config, diagnostic_path)
    return state


# -- persistence ----------------------------------------------------------

def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(HISTORY_COLUMNS), extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)


def checkpoint_save(state: TrainState, config: TrainConfig, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "spec": state.network.spec.to_dict(),
        "epoch": state.epoch,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in state.network.state_dict().items()},
        "velocity": {k: v.ravel().tolist() for k, v in state.velocity.items()},
        "stats": state.stats.to_dict(),
        "rng": _rng_state_to_json(state.rng),
        "probe": state.probe.tolist(),
        "history": state.history,
    }
    Path(path).write_text(json.dumps(payload))


def checkpoint_load(path) -> tuple[TrainState, TrainConfig]:
    try:
        payload = json.loads(Path(path).read_text())
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        config = TrainConfig.from_dict(payload["config"])
        spec = ModelSpec.from_dict(payload["spec"])
        net = Network(spec, np.random.default_rng(0), config.tau_start, config.tau_end)
        weights = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in payload["weights"].items()}
        net.load_state_dict(weights)
        velocity = {k: np.array(payload["velocity"][k], dtype=np.float64).reshape(weights[k].shape)
                    for k in weights}
        state = TrainState(epoch=int(payload["epoch"]), network=net,
                           stats=ib.ClassStatistics.from_dict(payload["stats"]),
                           velocity=velocity, rng=_rng_from_json(payload["rng"]),
                           probe=np.array(payload["probe"], dtype=np.int64),
                           history=payload["history"])
        return state, config
    except CheckpointError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({exc})") from exc
