"""Interpreters compared against ASH, and a uniform registry over all of them.

Every interpreter maps a detector and a point to an :class:`Attribution`
whose ``phi`` vector ranks features (higher = more anomalous).
"""

from __future__ import annotations

import time

import numpy as np

from ashap.charfn import AshCharFn, ReferenceCharFn, build_references
from ashap.detectors import DECOMPOSITION, GRADIENT, MARGINAL, ScoreModel
from ashap.errors import CapabilityError
from ashap.shapley import Attribution, attribute

STRATEGIES = ("ash", "ig", "ksh", "wksh", "marg", "sfe")


def _check_marginals(model):
    if not (model.has(MARGINAL) or model.has(DECOMPOSITION)):
        raise CapabilityError(
            f"{model.name} detector has neither subset marginals nor a per-feature decomposition")


def marginal_attribution(model: ScoreModel, x) -> np.ndarray:
    """Per-feature marginal energy (GMM) or squared residual (subspace)."""
    _check_marginals(model)
    return np.asarray(model.per_feature(np.asarray(x, dtype=float)), dtype=float)


def sfe_greedy(model: ScoreModel, x) -> list[int]:
    """Sequential-marginal feature ordering.

    Grows a coalition one feature at a time, always adding the feature whose
    inclusion gives the highest marginal score of the grown coalition. Ties go
    to the lower index.
    """
    _check_marginals(model)
    x = np.asarray(x, dtype=float)
    d = len(x)
    order: list[int] = []
    rest = list(range(d))
    while rest:
        scores = [float(model.marginal_score(x, order + [j])) for j in rest]
        best = rest[int(np.argmax(scores))]
        order.append(best)
        rest.remove(best)
    return order


def sfe_scores(order, d=None) -> np.ndarray:
    """Map an ordering to scores ``(d - rank + 1) / d`` with 1-based ranks."""
    d = len(order) if d is None else d
    out = np.zeros(d)
    for rank, j in enumerate(order, start=1):
        out[j] = (d - rank + 1) / d
    return out


def integrated_gradients(model: ScoreModel, x, reference, steps: int = 64) -> np.ndarray:
    """Path-integrated gradients from ``reference`` to ``x`` (midpoint rule)."""
    if not model.has(GRADIENT):
        raise CapabilityError(f"{model.name} detector has no gradient")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = np.asarray(x, dtype=float)
    r = np.asarray(reference, dtype=float).reshape(-1)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = r + alphas[:, None] * (x - r)
    grads = np.asarray(model.gradient(path))
    return (x - r) * grads.mean(axis=0)


def ash_attribution(model, x, gamma=0.01, m=None, seed=0, exhaustive=False, threads=None) -> Attribution:
    return attribute(AshCharFn(model, x, gamma, threads=threads), m=m, seed=seed, exhaustive=exhaustive)


def ksh_attribution(model, x, train, k=8, m=None, seed=0, exhaustive=False, refs=None) -> Attribution:
    """Multi-reference Shapley values with k-means centers of the training rows as references."""
    refs = refs if refs is not None else build_references("kmeans_centers", train, k=k, seed=seed)
    att = attribute(ReferenceCharFn(model, x, refs, kind="ksh"), m=m, seed=seed, exhaustive=exhaustive)
    return att


def wksh_attribution(model, x, train, k=8, m=None, seed=0, exhaustive=False) -> Attribution:
    """Multi-reference Shapley values with the k nearest training rows of ``x`` as references."""
    refs = build_references("knn_of_x", train, x=x, k=k)
    return attribute(ReferenceCharFn(model, x, refs, kind="wksh"), m=m, seed=seed, exhaustive=exhaustive)


def make_interpreter(strategy: str, model: ScoreModel, train=None, gamma=0.01, m=None, k=8,
                     ig_steps=64, seed=0, threads=None):
    """Return ``f(x, seed) -> Attribution`` for a named strategy.

    Anything that does not depend on ``x`` (k-means references, the training
    mean) is computed once here. Capability mismatches raise immediately.
    """
    if strategy == "ash":
        if not model.has(GRADIENT):
            raise CapabilityError(f"ash needs gradients; {model.name} detector has none")
        return lambda x, s=seed: ash_attribution(model, x, gamma=gamma, m=m, seed=s, threads=threads)
    if strategy in ("marg", "sfe"):
        _check_marginals(model)
    if strategy == "marg":
        def run(x, s=seed):
            t0 = time.perf_counter()
            phi = marginal_attribution(model, x)
            return Attribution(0.0, phi, {"strategy": "marg", "elapsed_ms": (time.perf_counter() - t0) * 1e3})
        return run
    if strategy == "sfe":
        def run(x, s=seed):
            t0 = time.perf_counter()
            order = sfe_greedy(model, x)
            return Attribution(0.0, sfe_scores(order), {"strategy": "sfe", "order": order,
                                                        "elapsed_ms": (time.perf_counter() - t0) * 1e3})
        return run
    if train is None:
        raise ValueError(f"{strategy} needs training data for its references")
    if strategy == "ig":
        if not model.has(GRADIENT):
            raise CapabilityError(f"ig needs gradients; {model.name} detector has none")
        ref = build_references("train_mean", train).references[0]
        base = float(model.score(ref))

        def run(x, s=seed):
            t0 = time.perf_counter()
            phi = integrated_gradients(model, x, ref, steps=ig_steps)
            return Attribution(base, phi, {"strategy": "ig", "steps": ig_steps,
                                           "elapsed_ms": (time.perf_counter() - t0) * 1e3})
        return run
    if strategy == "ksh":
        refs = build_references("kmeans_centers", train, k=k, seed=seed)
        return lambda x, s=seed: ksh_attribution(model, x, train, k=k, m=m, seed=s, refs=refs)
    if strategy == "wksh":
        return lambda x, s=seed: wksh_attribution(model, x, train, k=k, m=m, seed=s)
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
