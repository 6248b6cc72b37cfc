"""Shapley values: exact enumeration and the sampled least-squares estimator."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ashap.charfn import as_masks
from ashap.errors import EstimationError

MAX_EXACT_D = 12


class RankDeficientError(EstimationError):
    """The sampled coalitions do not determine every Shapley value."""


@dataclass(frozen=True, eq=False)
class Attribution:
    """Baseline ``phi0 = v(empty)`` plus one Shapley value per feature."""

    phi0: float
    phi: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "phi0", float(self.phi0))

    @property
    def d(self):
        return len(self.phi)

    @property
    def total(self) -> float:
        """phi0 + sum(phi), which equals v(N) by construction."""
        return self.phi0 + float(self.phi.sum())

    def to_dict(self) -> dict:
        out = {
            "strategy": self.meta.get("strategy"),
            "phi0": self.phi0,
            "phi": self.phi.tolist(),
            "m": self.meta.get("m"),
            "seed": self.meta.get("seed"),
            "gamma": self.meta.get("gamma"),
            "elapsed_ms": self.meta.get("elapsed_ms"),
        }
        for key, value in self.meta.items():
            out.setdefault(key, value)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, obj) -> "Attribution":
        meta = {k: v for k, v in obj.items() if k not in ("phi0", "phi")}
        return cls(obj["phi0"], obj["phi"], meta)


def all_masks(d: int) -> np.ndarray:
    """Every coalition of ``d`` players; row ``b`` has feature ``i`` iff bit ``i`` of ``b`` is set."""
    codes = np.arange(2 ** d)
    return ((codes[:, None] >> np.arange(d)) & 1).astype(bool)


def _values(v, masks):
    if hasattr(v, "evaluate_masks"):
        return np.asarray(v.evaluate_masks(masks), dtype=float)
    return np.array([float(v(frozenset(np.flatnonzero(m).tolist()))) for m in masks])


def exact_shapley(v, d: int) -> Attribution:
    """Shapley values by enumerating all ``2**d`` coalitions.

    ``v`` is a characteristic function object or any callable taking a
    frozenset of 0-based feature indices.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if d > MAX_EXACT_D:
        raise ValueError(f"exact enumeration is limited to d <= {MAX_EXACT_D}, got {d}")
    masks = all_masks(d)
    vals = _values(v, masks)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])
    codes = np.arange(2 ** d)
    phi = np.zeros(d)
    for i in range(d):
        without = codes[~masks[:, i]]
        with_i = without | (1 << i)
        phi[i] = np.sum(weight[sizes[without]] * (vals[with_i] - vals[without]))
    return Attribution(vals[0], phi, {"strategy": getattr(v, "kind", "table"), "method": "exact"})


def shapley_kernel(d: int, sizes) -> np.ndarray:
    """Weights ``(d-1) / (C(d,s) s (d-s))`` under which constrained least squares is exact."""
    sizes = np.asarray(sizes)
    out = np.zeros(sizes.shape)
    ok = (sizes > 0) & (sizes < d)
    s = sizes[ok]
    out[ok] = (d - 1) / (np.array([math.comb(d, int(k)) for k in s]) * s * (d - s))
    return out


@dataclass(frozen=True)
class SubsetSampler:
    """Draws coalitions with per-subset probability proportional to
    ``(d-1) |S|! (d-|S|-1)! / d!`` over sizes ``0 .. d-1``.

    The implied mass of size ``s`` is proportional to ``(d-1)/(d-s)``; within a
    size every subset is equally likely.
    """

    d: int
    m: int
    seed: int | None = 0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("subset sampling needs d >= 2")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    def size_probabilities(self) -> np.ndarray:
        s = np.arange(self.d)
        mass = (self.d - 1) / (self.d - s)
        return mass / mass.sum()

    def draw(self, rng=None) -> np.ndarray:
        rng = np.random.default_rng(self.seed) if rng is None else rng
        sizes = rng.choice(self.d, size=self.m, p=self.size_probabilities())
        ranks = np.argsort(rng.random((self.m, self.d)), axis=1).argsort(axis=1)
        return ranks < sizes[:, None]


def sample_subsets(sampler: SubsetSampler) -> np.ndarray:
    """``m`` sampled coalitions followed by the forced empty and full coalitions."""
    drawn = sampler.draw()
    anchors = np.array([np.zeros(sampler.d, dtype=bool), np.ones(sampler.d, dtype=bool)])
    return np.vstack([drawn, anchors])


def fit_least_squares(masks, values, v_empty, v_full, d, weights=None) -> Attribution:
    """Constrained least-squares fit of ``v(S) ~ phi0 + sum_{i in S} phi_i``.

    ``phi0`` is fixed to ``v_empty`` and ``sum(phi) = v_full - v_empty`` is
    enforced by eliminating the last coefficient. Coalitions of size 0 or
    ``d`` carry no information once those constraints hold and are dropped.

    Args:
        masks: coalitions as an (n, d) boolean array or a list of index sets.
            Repeated coalitions count with multiplicity.
        weights: per-row regression weights. The default ``1/|S|`` is the
            importance correction that turns rows drawn by
            :class:`SubsetSampler` (which favors large coalitions relative to
            the Shapley kernel) into an estimate of the kernel-weighted
            problem. Pass :func:`shapley_kernel` weights for an exhaustive
            enumeration, or :func:`inclusion_weights` for distinct draws.

    Raises:
        RankDeficientError: if the kept rows do not pin down every value.
    """
    masks = as_masks(masks, d)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(masks),):
        raise ValueError("need one value per coalition")
    total = float(v_full) - float(v_empty)
    if d == 1:
        return Attribution(v_empty, [total])
    sizes = masks.sum(axis=1)
    keep = (sizes > 0) & (sizes < d)
    if weights is None:
        w = np.zeros(len(masks))
        w[keep] = 1.0 / sizes[keep]
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(masks),):
            raise ValueError("need one weight per coalition")
    keep &= w > 0
    z = masks[keep].astype(float)
    target = values[keep] - float(v_empty) - z[:, -1] * total
    design = z[:, :-1] - z[:, -1:]
    sw = np.sqrt(w[keep])
    coef, _, rank, _ = np.linalg.lstsq(design * sw[:, None], target * sw, rcond=None)
    if rank < d - 1:
        raise RankDeficientError(f"design has rank {rank}, need {d - 1}")
    phi = np.append(coef, total - coef.sum())
    return Attribution(v_empty, phi)


def default_m(d: int) -> int:
    return 2 * d + 2 ** 11


def inclusion_weights(sampler: SubsetSampler, masks) -> np.ndarray:
    """Kernel weight divided by the chance a coalition shows up at least once in ``m`` draws.

    Used on distinct sampled coalitions this is a Horvitz-Thompson estimate of
    the kernel-weighted regression: consistent in ``m`` and exact once every
    coalition has been drawn.
    """
    d, m = sampler.d, sampler.m
    sizes = np.asarray(masks).sum(axis=1)
    out = np.zeros(len(sizes))
    ok = (sizes > 0) & (sizes < d)
    s = sizes[ok].astype(float)
    p_size = sampler.size_probabilities()[sizes[ok]]
    log_comb = np.array([math.lgamma(d + 1) - math.lgamma(k + 1) - math.lgamma(d - k + 1) for k in s])
    p = np.exp(np.log(p_size) - log_comb)
    # kernel / p and inclusion / p are both free of the binomial coefficient
    kernel_over_p = (d - 1) / (s * (d - s) * p_size)
    small = m * p < 1e-12
    incl_over_p = np.full(len(p), float(m))
    incl_over_p[~small] = -np.expm1(m * np.log1p(-p[~small])) / p[~small]
    out[ok] = kernel_over_p / incl_over_p
    return out


WEIGHTINGS = ("inclusion", "multiplicity")


def attribute(v, m: int | None = None, seed: int | None = 0, exhaustive: bool = False,
              weighting: str = "inclusion", max_augment: int = 3) -> Attribution:
    """Shapley values of the game ``v`` (a prepared characteristic function).

    Draws ``m`` coalitions (default ``2d + 2**11``) with :class:`SubsetSampler`,
    evaluates ``v`` on them and on the empty and full coalitions, and solves the
    constrained regression.

    ``weighting="inclusion"`` regresses on the distinct drawn coalitions with
    :func:`inclusion_weights`; ``"multiplicity"`` keeps every draw and uses the
    ``1/|S|`` importance weights of :func:`fit_least_squares`. With
    ``exhaustive=True`` every coalition is used with Shapley-kernel weights,
    which reproduces exact Shapley values.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    t0 = time.perf_counter()
    d = v.d
    meta = dict(v.meta()) if hasattr(v, "meta") else {"strategy": getattr(v, "kind", "table")}
    anchors = np.array([np.zeros(d, dtype=bool), np.ones(d, dtype=bool)])

    if d == 1:
        v_empty, v_full = _values(v, anchors)
        att = Attribution(v_empty, [v_full - v_empty])
        meta.update(m=0, seed=seed)
    elif exhaustive:
        masks = all_masks(d)
        vals = _values(v, masks)
        att = fit_least_squares(masks, vals, vals[0], vals[-1], d, weights=shapley_kernel(d, masks.sum(axis=1)))
        meta.update(m=len(masks) - 2, seed=seed, method="exhaustive")
    else:
        m = default_m(d) if m is None else int(m)
        sampler = SubsetSampler(d, m, seed)
        drawn = sampler.draw()
        v_empty, v_full = _values(v, anchors)
        rng = np.random.default_rng([0 if seed is None else int(seed), 1])
        for attempt in range(max_augment + 1):
            try:
                if weighting == "inclusion":
                    uniq = np.unique(drawn, axis=0)
                    att = fit_least_squares(uniq, _values(v, uniq), v_empty, v_full, d,
                                            weights=inclusion_weights(sampler, uniq))
                else:
                    att = fit_least_squares(drawn, _evaluate_unique(v, drawn), v_empty, v_full, d)
                break
            except RankDeficientError:
                if attempt == max_augment:
                    raise EstimationError(
                        f"could not identify all {d} Shapley values from {len(drawn)} coalitions") from None
                extra = np.zeros((d, d), dtype=bool)
                extra[np.arange(d), rng.integers(d, size=d)] = True
                drawn = np.vstack([drawn, extra])
        meta.update(m=m, seed=seed, weighting=weighting)
    meta["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
    return Attribution(att.phi0, att.phi, meta)


def _evaluate_unique(v, masks):
    uniq, inverse = np.unique(masks, axis=0, return_inverse=True)
    return _values(v, uniq)[inverse.ravel()]
