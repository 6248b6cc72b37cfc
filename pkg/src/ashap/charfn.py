"""Characteristic functions v(S; x) over feature coalitions.

Two families are provided:

* :class:`AshCharFn` -- the score at a surrogate point whose absent
  coordinates come from local minimizers of the penalized anomaly score,
  computed once for the empty coalition and every singleton.
* :class:`ReferenceCharFn` -- the score with absent coordinates replaced by
  reference vectors, averaged over the references.

Coalitions are boolean masks of length ``d`` (``True`` = feature present);
anywhere a single coalition is accepted, an iterable of 0-based indices works
too.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ashap.detectors import GRADIENT, ScoreModel
from ashap.errors import CapabilityError, OptimizationError
from ashap.optim import minimize_lbfgs

DENOM_FLOOR = 1e-6


def as_mask(S, d) -> np.ndarray:
    """Coalition as a boolean mask of length ``d``."""
    if isinstance(S, np.ndarray) and S.dtype == bool:
        if S.shape != (d,):
            raise ValueError(f"mask must have shape ({d},), got {S.shape}")
        return S
    mask = np.zeros(d, dtype=bool)
    idx = [int(i) for i in S]
    if idx and (min(idx) < 0 or max(idx) >= d):
        raise ValueError(f"feature indices must lie in [0, {d})")
    mask[idx] = True
    return mask


def as_masks(subsets, d) -> np.ndarray:
    if isinstance(subsets, np.ndarray) and subsets.dtype == bool and subsets.ndim == 2:
        if subsets.shape[1] != d:
            raise ValueError(f"masks must have {d} columns")
        return subsets
    return np.array([as_mask(S, d) for S in subsets], dtype=bool).reshape(-1, d)


class CharacteristicFn:
    """A coalition game bound to one detector ``model`` and one point ``x``."""

    kind = "abstract"

    def __init__(self, model: ScoreModel, x):
        self.model = model
        self.x = np.array(x, dtype=float)
        self.x.setflags(write=False)
        if self.x.shape != (model.d,):
            raise ValueError(f"x must have {model.d} entries, got shape {self.x.shape}")
        self.d = model.d

    def evaluate_masks(self, masks) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, S) -> float:
        return float(self.evaluate_masks(as_mask(S, self.d)[None])[0])

    def __call__(self, S) -> float:
        return self.evaluate(S)

    def meta(self) -> dict:
        return {"strategy": self.kind}


# ---------------------------------------------------------------- ASH


def _penalty_weights(x, free, gamma):
    denom = np.maximum(x[free] ** 2, DENOM_FLOOR)
    return gamma / free.sum() / denom


def ash_penalized_objective(model: ScoreModel, x, S, y, gamma) -> float:
    """Score at ``y`` plus the proximity penalty on the coordinates outside ``S``.

    The penalty is ``gamma / |S^c| * sum_{i in S^c} (y_i - x_i)^2 / max(x_i^2, 1e-6)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = as_mask(S, len(x))
    free = ~mask
    if not free.any():
        raise ValueError("coalition covers every feature; no free coordinates")
    if not np.array_equal(y[mask], x[mask]):
        raise ValueError("y must agree with x on the coalition")
    w = _penalty_weights(x, free, gamma)
    return float(model.score(y)) + float(np.sum(w * (y[free] - x[free]) ** 2))


def ash_minimize(model: ScoreModel, x, s, gamma, gtol=1e-6, max_iter=200) -> np.ndarray:
    """Local minimizer of the penalized score with coordinates in ``s`` held at ``x``.

    Starts from ``y = x`` and runs L-BFGS over the free coordinates only, so the
    returned point matches ``x`` exactly on ``s``. A full coalition returns ``x``.
    """
    if not model.has(GRADIENT):
        raise CapabilityError(f"{model.name} detector has no gradient; cannot build anchor points")
    x = np.asarray(x, dtype=float)
    mask = as_mask(s, len(x))
    free = ~mask
    if not free.any():
        return x.copy()
    w = _penalty_weights(x, free, gamma)
    x_free = x[free]
    y = x.copy()

    def fun_grad(z):
        y[free] = z
        diff = z - x_free
        f = float(model.score(y)) + float(np.sum(w * diff * diff))
        g = np.asarray(model.gradient(y))[free] + 2.0 * w * diff
        return f, g

    res = minimize_lbfgs(fun_grad, x_free, gtol=gtol, max_iter=max_iter)
    out = x.copy()
    out[free] = res.x
    return out


@dataclass(frozen=True, eq=False)
class AshState:
    """Anchor points for one target ``x``.

    Row 0 of ``anchors`` is the minimizer for the empty coalition; row ``i + 1``
    is the minimizer with feature ``i`` fixed.
    """

    x: np.ndarray
    gamma: float
    anchors: np.ndarray
    anchor_scores: np.ndarray
    score_x: float

    @property
    def d(self):
        return len(self.x)


def ash_prepare(model: ScoreModel, x, gamma=0.01, gtol=1e-6, max_iter=200, threads=None) -> AshState:
    """Solve the d + 1 anchor minimizations (empty coalition and every singleton)."""
    x = np.array(x, dtype=float)
    d = len(x)
    if d < 1:
        raise ValueError("x must have at least one feature")
    coalitions = [()] + [(i,) for i in range(d)]

    def solve(j):
        try:
            return ash_minimize(model, x, coalitions[j], gamma, gtol=gtol, max_iter=max_iter)
        except OptimizationError as exc:
            label = "empty coalition" if j == 0 else f"feature {j - 1} fixed"
            raise OptimizationError(f"anchor minimization failed ({label}): {exc}") from exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            anchors = list(pool.map(solve, range(d + 1)))
    else:
        anchors = [solve(j) for j in range(d + 1)]
    anchors = np.array(anchors)
    scores = np.asarray(model.score(anchors), dtype=float)
    x.setflags(write=False)
    anchors.setflags(write=False)
    scores.setflags(write=False)
    return AshState(x, float(gamma), anchors, scores, float(model.score(x)))


def surrogate_points(state: AshState, masks) -> np.ndarray:
    """Batch version of :func:`ash_surrogate_point`, one row per mask."""
    masks = as_masks(masks, state.d)
    m = masks.astype(float)
    comp = (state.anchors[0] + m @ state.anchors[1:]) / (m.sum(axis=1, keepdims=True) + 1.0)
    return np.where(masks, state.x, comp)


def ash_surrogate_point(state: AshState, S) -> np.ndarray:
    """``x`` on the coalition; the mean of the empty-set anchor and the
    coalition's singleton anchors elsewhere."""
    return surrogate_points(state, as_mask(S, state.d)[None])[0]


def ash_evaluate(state: AshState, model: ScoreModel, S) -> float:
    return float(model.score(ash_surrogate_point(state, S)))


class AshCharFn(CharacteristicFn):
    """Score at the anchor-averaged surrogate point."""

    kind = "ash"

    def __init__(self, model: ScoreModel, x, gamma=0.01, gtol=1e-6, max_iter=200, threads=None, state=None):
        super().__init__(model, x)
        self.gamma = float(gamma)
        self.state = state if state is not None else ash_prepare(
            model, self.x, gamma, gtol=gtol, max_iter=max_iter, threads=threads)

    def evaluate_masks(self, masks):
        masks = as_masks(masks, self.d)
        values = np.asarray(self.model.score(surrogate_points(self.state, masks)), dtype=float)
        # exact v(N; x) = e(x)
        values[masks.all(axis=1)] = self.state.score_x
        return values

    def meta(self):
        return {"strategy": self.kind, "gamma": self.gamma}


# ---------------------------------------------------------------- reference-based

REFERENCE_ORIGINS = ("train_mean", "kmeans_centers", "knn_of_x", "given")


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    references: np.ndarray
    origin: str = "given"

    def __post_init__(self):
        refs = np.atleast_2d(np.array(self.references, dtype=float))
        if refs.shape[0] == 0:
            raise ValueError("reference set must be non-empty")
        if not np.all(np.isfinite(refs)):
            raise ValueError("references must be finite")
        if self.origin not in REFERENCE_ORIGINS:
            raise ValueError(f"unknown reference origin {self.origin!r}")
        refs.setflags(write=False)
        object.__setattr__(self, "references", refs)

    def __len__(self):
        return len(self.references)

    @property
    def d(self):
        return self.references.shape[1]


def _reference_values(model, x, masks, refs):
    n, d = masks.shape
    pts = np.where(masks[:, None, :], x[None, None, :], refs[None, :, :])
    scores = np.asarray(model.score(pts.reshape(-1, d)), dtype=float).reshape(n, len(refs))
    return scores.mean(axis=1)


def reference_evaluate(model: ScoreModel, x, S, refs: ReferenceSet) -> float:
    """Mean score over references of ``x`` with absent coordinates taken from each reference."""
    x = np.asarray(x, dtype=float)
    if refs.d != len(x):
        raise ValueError(f"references have {refs.d} features, x has {len(x)}")
    return float(_reference_values(model, x, as_mask(S, len(x))[None], refs.references)[0])


def build_references(kind, train, x=None, k=8, seed=0) -> ReferenceSet:
    """Reference vectors drawn from the training rows.

    ``train_mean`` gives the single mean row; ``kmeans_centers`` runs k-means
    (10 restarts) and returns its ``k`` centers; ``knn_of_x`` returns the ``k``
    Euclidean nearest training rows of ``x``.
    """
    rows = train.rows if hasattr(train, "rows") else np.atleast_2d(np.asarray(train, dtype=float))
    if len(rows) == 0:
        raise ValueError("training data is empty")
    if kind == "train_mean":
        return ReferenceSet(rows.mean(axis=0, keepdims=True), "train_mean")
    if k < 1 or k > len(rows):
        raise ValueError(f"k must lie in [1, {len(rows)}], got {k}")
    if kind == "kmeans_centers":
        from sklearn.cluster import KMeans

        n_distinct = len(np.unique(rows, axis=0))
        km = KMeans(n_clusters=min(k, n_distinct), n_init=10, random_state=seed).fit(rows)
        return ReferenceSet(km.cluster_centers_, "kmeans_centers")
    if kind == "knn_of_x":
        if x is None:
            raise ValueError("knn_of_x references need the target point x")
        x = np.asarray(x, dtype=float)
        dist = np.sum((rows - x) ** 2, axis=1)
        idx = np.argsort(dist, kind="stable")[:k]
        return ReferenceSet(rows[idx], "knn_of_x")
    raise ValueError(f"unknown reference kind {kind!r}")


class ReferenceCharFn(CharacteristicFn):
    """Score with absent features replaced by references, averaged over references."""

    def __init__(self, model: ScoreModel, x, refs: ReferenceSet, kind=None):
        super().__init__(model, x)
        if refs.d != self.d:
            raise ValueError(f"references have {refs.d} features, expected {self.d}")
        self.refs = refs
        self.kind = kind or ("single_reference" if len(refs) == 1 else "multi_reference")
        self._score_x = float(model.score(self.x))

    def evaluate_masks(self, masks):
        masks = as_masks(masks, self.d)
        values = _reference_values(self.model, self.x, masks, self.refs.references)
        values[masks.all(axis=1)] = self._score_x
        return values

    def meta(self):
        return {"strategy": self.kind, "references": self.refs.origin, "n_references": len(self.refs)}


class TableCharFn:
    """A game given by an explicit table or callable over coalitions, not tied to a detector."""

    kind = "table"

    def __init__(self, d, fn):
        self.d = int(d)
        self._fn = fn

    def evaluate_masks(self, masks):
        masks = as_masks(masks, self.d)
        return np.array([float(self._fn(frozenset(np.flatnonzero(m).tolist()))) for m in masks])

    def evaluate(self, S):
        return float(self.evaluate_masks(as_mask(S, self.d)[None])[0])

    __call__ = evaluate

    def meta(self):
        return {"strategy": self.kind}
