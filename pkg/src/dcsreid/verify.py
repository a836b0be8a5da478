"""Randomised bound suites and gradient checks used by ``dcsreid verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ib
from . import tensor as T


@dataclass
class BoundInstance:
    phi_F: np.ndarray
    phi_X: np.ndarray
    labels: np.ndarray
    Q: np.ndarray
    q_kind: str


def random_instance(rng: np.random.Generator, max_n: int = 64, max_classes: int = 8,
                    max_dim: int = 16, q_kind: str | None = None) -> BoundInstance:
    """Random features/inputs, centroids as class means, phi by soft assignment.

    ``q_kind`` is ``"exact"`` (closed-form update from phi_F), ``"random"``
    (Dirichlet columns) or ``None`` to pick one at random.
    """
    k = int(rng.integers(2, max_classes + 1))
    n = int(rng.integers(2 * k, max(2 * k, max_n) + 1))
    d = int(rng.integers(1, max_dim + 1))
    labels = rng.integers(0, k, n)
    labels[:k] = rng.permutation(k)
    scale_f, scale_x = np.exp(rng.uniform(np.log(0.1), np.log(3.0), size=2))
    F = rng.normal(size=(n, d)) * scale_f
    X = rng.normal(size=(n, d)) * scale_x
    phi_F = ib.soft_assignment(F, ib.update_centroids(F, labels, k)).data
    phi_X = ib.soft_assignment(X, ib.update_centroids(X, labels, k)).data
    if q_kind is None:
        q_kind = "exact" if rng.random() < 0.5 else "random"
    if q_kind == "exact":
        Q = ib.update_variational_q(phi_F, labels, k)
    else:
        Q = rng.dirichlet(np.ones(k), size=k).T
    return BoundInstance(phi_F, phi_X, labels, Q, q_kind)


def bound_suite(num_instances: int = 1000, seed: int = 0, tol: float = -1e-9) -> dict:
    """Evaluate the bound, both lemmas and exact-Q tightness on random instances."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rows = []
    for _ in range(num_instances):
        inst = random_instance(rng)
        ibv = ib.ib_loss(inst.phi_F, inst.phi_X, inst.labels)
        ibb = ib.ibb_loss(inst.phi_F, inst.phi_X, inst.labels, inst.Q).item()
        exact_q = ib.update_variational_q(inst.phi_F, inst.labels)
        uni_q = ib.uniform_q(*exact_q.shape)
        rows.append((
            ibb - ibv,
            ib.ibb_bound(inst.phi_F, inst.phi_X, inst.labels, inst.Q) - ibv,
            ib.lemma1_gap(inst.phi_F, inst.phi_X),
            ib.lemma2_gap(inst.phi_F, inst.labels, inst.Q),
            ib.lemma2_gap(inst.phi_F, inst.labels, exact_q) - ib.lemma2_gap(inst.phi_F, inst.labels, uni_q),
            inst.q_kind == "exact",
        ))
    arr = np.array(rows, dtype=float)
    elapsed = time.perf_counter() - t0

    def summary(col, ok):
        values = arr[:, col]
        return {"min": float(values.min()), "max": float(values.max()), "violations": int(np.sum(~ok(values))), "passed": bool(np.all(ok(values)))}

    exact = arr[:, 5].astype(bool)
    bound = summary(0, lambda v: v >= tol)
    bound["violations_exact_q"] = int(np.sum(arr[exact, 0] < tol))
    bound["violations_random_q"] = int(np.sum(arr[~exact, 0] < tol))
    return {
        "instances": num_instances,
        "seconds": elapsed,
        "ibb_bound": bound,
        "ibb_bound_with_input_term": summary(1, lambda v: v >= tol),
        "lemma1": summary(2, lambda v: v >= tol),
        "lemma2": summary(3, lambda v: v >= tol),
        "exact_q_tightness": summary(4, lambda v: v <= 1e-12),
    }


def gradient_suite(num_configs: int = 100, seed: int = 0, tol: float = 1e-4) -> dict:
    """Composite loss, DCS attention (through theta) and latency cost against central differences."""
    from .gradchecks import composite_loss_case, dcs_attention_case, latency_cost_case

    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    out = {}
    for name, case in (("composite_train_loss", composite_loss_case),
                       ("dcs_attention", dcs_attention_case),
                       ("latency_cost", latency_cost_case)):
        errs = [case(rng) for _ in range(num_configs)]
        out[name] = {"max_rel_err": float(max(errs)), "configs": num_configs,
                     "passed": bool(max(errs) < tol)}
    out["seconds"] = time.perf_counter() - t0
    return out


def relative_gradient_error(fn, x: np.ndarray) -> float:
    analytic = T.grad_of(lambda t: fn(t), x)[0]
    numeric = T.fd_gradient_oracle(lambda v: fn(T.Tensor(v)).item(), x)
    return T.relative_error(analytic, numeric)
