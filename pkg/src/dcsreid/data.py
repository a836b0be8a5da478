"""Synthetic identity-clustered datasets and PK batch sampling.

Each sample is a flat vector that reshapes to a ``tokens x channels`` grid.
Two generators:

``generate``       identity centroids on a sphere plus isotropic noise; every
                   channel carries identity signal.
``generate_hard``  only a known subset of channels carries identity signal and
                   only on a random subset of "foreground" tokens per sample;
                   the remaining channels carry a camera style shared by all
                   identities plus per-token noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ParameterError

FORMAT = "dcsreid-dataset"
VERSION = 1

TRAIN, QUERY, GALLERY = 0, 1, 2


@dataclass
class IdentityDataset:
    samples: np.ndarray            # [n, tokens * channels]
    labels: np.ndarray             # [n], 0-based identity index
    split: np.ndarray              # [n], TRAIN / QUERY / GALLERY
    tokens: int
    channels: int
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if self.samples.shape[1] != self.tokens * self.channels:
            raise ParameterError(
                f"sample width {self.samples.shape[1]} != tokens*channels {self.tokens * self.channels}")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, part: int) -> np.ndarray:
        return np.flatnonzero(self.split == part)

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices(TRAIN)

    def grid(self, idx=None) -> np.ndarray:
        x = self.samples if idx is None else self.samples[idx]
        return x.reshape(-1, self.tokens, self.channels)

    @property
    def signal_channels(self) -> list[int]:
        return list(self.spec.get("signal_channels", range(self.channels)))


def _sphere(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    v = rng.normal(size=(count, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _split(labels: np.ndarray, rng: np.random.Generator, train_fraction: float,
           query_per_identity: int) -> np.ndarray:
    """Per identity: training samples, then query, then gallery.

    With fewer than four samples per identity there is nothing left to hold
    out, so every sample trains and the first one also serves as the query.
    """
    split = np.full(labels.size, GALLERY)
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        m = idx.size
        if m < 4:
            split[idx] = TRAIN
            continue
        n_train = min(max(2, int(round(train_fraction * m))), m - 2)
        n_query = min(query_per_identity, m - n_train - 1)
        split[idx[:n_train]] = TRAIN
        split[idx[n_train:n_train + n_query]] = QUERY
    return split


def eval_indices(ds: IdentityDataset) -> tuple[np.ndarray, np.ndarray]:
    """Query and gallery indices; falls back to reusing training samples for tiny identities."""
    q, g = ds.indices(QUERY), ds.indices(GALLERY)
    if q.size and g.size:
        return q, g
    qs, gs = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        qs.append(idx[:1])
        gs.append(idx[1:])
    return np.concatenate(qs), np.concatenate(gs)


def _check(identities: int, per_identity: int, tokens: int, channels: int, noise: float):
    if identities < 2:
        raise ParameterError("need at least 2 identities")
    if per_identity < 2:
        raise ParameterError("need at least 2 samples per identity")
    if tokens < 1 or channels < 1:
        raise ParameterError("tokens and channels must be positive")
    if noise < 0:
        raise ParameterError("noise scale must be nonnegative")


def generate(identities: int = 10, per_identity: int = 20, tokens: int = 4, channels: int = 8,
             noise: float = 0.3, seed: int = 0, radius: float = 3.0, cameras: int = 0,
             camera_scale: float = 0.5, train_fraction: float = 0.5,
             query_per_identity: int = 2) -> IdentityDataset:
    """Separable generator: sample = centroid + camera offset + N(0, noise^2)."""
    _check(identities, per_identity, tokens, channels, noise)
    rng = np.random.default_rng(seed)
    dim = tokens * channels
    centroids = _sphere(rng, identities, dim, radius)
    labels = np.repeat(np.arange(identities), per_identity)
    x = centroids[labels] + noise * rng.normal(size=(labels.size, dim))
    if cameras > 0:
        styles = camera_scale * rng.normal(size=(cameras, dim))
        x = x + styles[rng.integers(0, cameras, labels.size)]
    split = _split(labels, rng, train_fraction, query_per_identity)
    spec = dict(generator="separable", identities=identities, per_identity=per_identity, dim=dim,
                tokens=tokens, channels=channels, noise=noise, seed=seed, radius=radius,
                cameras=cameras, camera_scale=camera_scale, train_fraction=train_fraction,
                query_per_identity=query_per_identity)
    return IdentityDataset(x, labels, split, tokens, channels, spec)


def generate_hard(identities: int = 10, per_identity: int = 40, tokens: int = 6, channels: int = 8,
                  signal_fraction: float = 0.25, noise: float = 0.3, seed: int = 0,
                  signal_radius: float = 2.0, foreground_fraction: float = 0.5,
                  cameras: int = 3, camera_scale: float = 1.0, nuisance_noise: float = 1.0,
                  train_fraction: float = 0.5, query_per_identity: int = 2) -> IdentityDataset:
    """Generator where only ``signal_fraction`` of the channels identify the person."""
    _check(identities, per_identity, tokens, channels, noise)
    n_signal = int(round(signal_fraction * channels))
    if not 1 <= n_signal < channels:
        raise ParameterError("signal_fraction must leave at least one signal and one nuisance channel")
    n_fg = max(1, int(round(foreground_fraction * tokens)))
    rng = np.random.default_rng(seed)
    signal = np.sort(rng.choice(channels, n_signal, replace=False))
    nuisance = np.setdiff1d(np.arange(channels), signal)
    protos = _sphere(rng, identities, n_signal, signal_radius)
    styles = camera_scale * rng.normal(size=(cameras, nuisance.size)) if cameras > 0 else np.zeros((1, nuisance.size))
    labels = np.repeat(np.arange(identities), per_identity)
    n = labels.size
    x = np.zeros((n, tokens, channels))
    for i in range(n):
        fg = rng.choice(tokens, n_fg, replace=False)
        sig = noise * rng.normal(size=(tokens, n_signal))
        sig[fg] += protos[labels[i]]
        cam = styles[rng.integers(0, styles.shape[0])]
        nui = cam + nuisance_noise * rng.normal(size=(tokens, nuisance.size))
        x[i][:, signal] = sig
        x[i][:, nuisance] = nui
    split = _split(labels, rng, train_fraction, query_per_identity)
    spec = dict(generator="hard", identities=identities, per_identity=per_identity,
                dim=tokens * channels, tokens=tokens, channels=channels, noise=noise, seed=seed,
                signal_fraction=signal_fraction, signal_channels=signal.tolist(),
                signal_radius=signal_radius, foreground_fraction=foreground_fraction,
                cameras=cameras, camera_scale=camera_scale, nuisance_noise=nuisance_noise,
                train_fraction=train_fraction, query_per_identity=query_per_identity)
    return IdentityDataset(x.reshape(n, -1), labels, split, tokens, channels, spec)


@dataclass
class PKBatch:
    indices: np.ndarray    # [P * K], grouped by identity
    identities: np.ndarray  # [P]
    K: int


def sample_pk_batch(labels, P: int, K: int, rng: np.random.Generator,
                    pool=None, require_negatives: bool = True) -> PKBatch:
    """``P`` distinct identities with ``K`` distinct samples each, uniformly without replacement.

    ``pool`` restricts sampling to a subset of indices (e.g. the training split).
    """
    labels = np.asarray(labels)
    pool = np.arange(labels.size) if pool is None else np.asarray(pool)
    if K < 2:
        raise ParameterError("K must be at least 2 for triplet positives")
    if require_negatives and P < 2:
        raise ParameterError("P must be at least 2 when negatives are needed")
    ids, counts = np.unique(labels[pool], return_counts=True)
    eligible = ids[counts >= K]
    if P > eligible.size:
        raise ParameterError(f"P={P} exceeds the {eligible.size} identities with >= {K} samples")
    chosen = np.sort(rng.choice(eligible, P, replace=False))
    parts = [rng.choice(pool[labels[pool] == k], K, replace=False) for k in chosen]
    return PKBatch(np.concatenate(parts), chosen, K)


def epoch_batches(labels, P: int, K: int, rng: np.random.Generator, pool=None) -> list[PKBatch]:
    """As many PK batches as cover the pool once on average (at least one)."""
    pool = np.arange(len(labels)) if pool is None else np.asarray(pool)
    count = max(1, pool.size // (P * K))
    return [sample_pk_batch(labels, P, K, rng, pool) for _ in range(count)]


def save_dataset(ds: IdentityDataset, path) -> None:
    payload = {
        "format": FORMAT, "version": VERSION,
        "header": {"n": len(ds), "tokens": ds.tokens, "channels": ds.channels,
                   "num_classes": ds.num_classes, "spec": ds.spec},
        "samples": ds.samples.ravel().tolist(),
        "labels": ds.labels.tolist(),
        "split": ds.split.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_dataset(path) -> IdentityDataset:
    try:
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a dataset file")
        if payload.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported dataset version {payload.get('version')}")
        h = payload["header"]
        samples = np.array(payload["samples"], dtype=np.float64).reshape(h["n"], h["tokens"] * h["channels"])
        return IdentityDataset(samples, payload["labels"], payload["split"], h["tokens"], h["channels"], h["spec"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: cannot parse dataset file ({exc})") from exc
