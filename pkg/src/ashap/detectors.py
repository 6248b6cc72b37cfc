"""Anomaly detectors trained on normal data.

Every detector is a :class:`ScoreModel`: ``score`` returns the anomaly score
(higher is more anomalous) for one point or a batch of points, and optional
capabilities expose the gradient, subset marginals, and a per-feature
decomposition of the score.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from ashap.data import Dataset
from ashap.errors import CapabilityError, FitError, ModelFormatError

log = logging.getLogger(__name__)

GRADIENT = "gradient"
MARGINAL = "marginal"
DECOMPOSITION = "decomposition"

LOG_2PI = float(np.log(2.0 * np.pi))
MODEL_FORMAT = "ashap-model"
MODEL_VERSION = 1


def _batch(x, d):
    """Return ``(rows, was_single)`` with rows shaped (n, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.ndim != 2 or rows.shape[1] != d:
        raise ValueError(f"expected input with {d} features, got shape {x.shape}")
    return rows, single


def _subset_index(subset, d):
    idx = np.asarray(sorted({int(i) for i in subset}), dtype=int)
    if idx.size == 0:
        raise ValueError("subset must be non-empty")
    if idx[0] < 0 or idx[-1] >= d:
        raise ValueError(f"subset indices must lie in [0, {d})")
    return idx


class ScoreModel:
    """Interface of a trained detector.

    Subclasses set ``d`` and ``capabilities`` and implement :meth:`score`.
    Methods outside the declared capabilities raise :class:`CapabilityError`.
    """

    name = "score"
    d: int
    capabilities: frozenset = frozenset()

    def score(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.score(x)

    def has(self, capability) -> bool:
        return capability in self.capabilities

    def gradient(self, x):
        raise CapabilityError(f"{self.name} detector does not provide gradients")

    def marginal_score(self, x, subset):
        """Score of the coordinates in ``subset`` alone."""
        raise CapabilityError(f"{self.name} detector does not provide subset marginals")

    def per_feature(self, x):
        """Per-feature marginal scores, one entry per coordinate."""
        if MARGINAL not in self.capabilities:
            raise CapabilityError(f"{self.name} detector does not provide per-feature scores")
        return np.array([self.marginal_score(x, [i]) for i in range(self.d)])


class FunctionScore(ScoreModel):
    """Wrap plain callables as a detector (handy for custom or opaque scores)."""

    def __init__(self, fn, d, gradient=None, name="function", vectorized=False):
        self.fn = fn
        self.d = int(d)
        self._grad = gradient
        self.name = name
        self.vectorized = vectorized
        self.capabilities = frozenset({GRADIENT}) if gradient is not None else frozenset()

    def score(self, x):
        rows, single = _batch(x, self.d)
        if self.vectorized:
            out = np.asarray(self.fn(rows), dtype=float)
        else:
            out = np.array([float(self.fn(r)) for r in rows])
        return float(out[0]) if single else out

    def gradient(self, x):
        if self._grad is None:
            return super().gradient(x)
        rows, single = _batch(x, self.d)
        out = np.array([np.asarray(self._grad(r), dtype=float) for r in rows])
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class GmmModel(ScoreModel):
    """Full-covariance Gaussian mixture; the anomaly score is the energy -log p(x)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: tuple = field(default=(), repr=False)

    name = "gmm"
    capabilities = frozenset({GRADIENT, MARGINAL})

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        mu = np.atleast_2d(np.array(self.means, dtype=float))
        cov = np.array(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        K, d = mu.shape
        if w.shape != (K,) or cov.shape != (K, d, d):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to one")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariances must be positive definite") from None
        diag = np.diagonal(chol, axis1=1, axis2=2)
        if np.any(diag <= 0):
            raise ValueError("covariances must be positive definite")
        eye = np.eye(d)
        chol_inv = np.stack([solve_triangular(L, eye, lower=True) for L in chol])
        prec = np.einsum("kji,kjl->kil", chol_inv, chol_inv)
        logdet = 2.0 * np.log(diag).sum(axis=1)
        for a in (w, mu, cov, chol, chol_inv, prec, logdet):
            a.setflags(write=False)
        set_ = object.__setattr__
        set_(self, "weights", w)
        set_(self, "means", mu)
        set_(self, "covariances", cov)
        set_(self, "chol", chol)
        set_(self, "_chol_inv", chol_inv)
        set_(self, "precisions", prec)
        set_(self, "logdets", logdet)
        set_(self, "d", d)
        set_(self, "log_likelihood_trace", tuple(self.log_likelihood_trace))

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_log_density(self, rows):
        """log(pi_k) + log N(x; mu_k, Sigma_k) for each row and component, shape (n, K)."""
        diff = rows[:, None, :] - self.means[None, :, :]
        z = np.einsum("kij,nkj->nki", self._chol_inv, diff)
        maha = np.einsum("nki,nki->nk", z, z)
        return np.log(self.weights) - 0.5 * (self.d * LOG_2PI + self.logdets) - 0.5 * maha

    def score(self, x):
        rows, single = _batch(x, self.d)
        e = -logsumexp(self.component_log_density(rows), axis=1)
        return float(e[0]) if single else e

    energy = score

    def responsibilities(self, x):
        rows, single = _batch(x, self.d)
        lc = self.component_log_density(rows)
        r = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        return r[0] if single else r

    def gradient(self, x):
        rows, single = _batch(x, self.d)
        r = self.responsibilities(rows)
        diff = rows[:, None, :] - self.means[None, :, :]
        g = np.einsum("nk,kij,nkj->ni", r, self.precisions, diff)
        return g[0] if single else g

    def marginal(self, subset) -> "GmmModel":
        """The mixture restricted to the coordinates in ``subset``."""
        idx = _subset_index(subset, self.d)
        return GmmModel(self.weights, self.means[:, idx], self.covariances[:, idx[:, None], idx[None, :]])

    def marginal_score(self, x, subset):
        idx = _subset_index(subset, self.d)
        x = np.asarray(x, dtype=float)
        return self.marginal(idx).score(x[..., idx])

    def per_feature(self, x):
        rows, single = _batch(x, self.d)
        out = np.empty_like(rows)
        for i in range(self.d):
            sd = np.sqrt(self.covariances[:, i, i])
            z = (rows[:, i, None] - self.means[None, :, i]) / sd
            lc = np.log(self.weights) - 0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z
            out[:, i] = -logsumexp(lc, axis=1)
        return out[0] if single else out

    def to_dict(self):
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["weights"]), np.asarray(obj["means"]), np.asarray(obj["covariances"]))


@dataclass(frozen=True, eq=False)
class SubspaceModel(ScoreModel):
    """Linear encoder/decoder: reconstruction through an orthonormal basis.

    The score is ``||(I - P)(x - mean)||^2`` with ``P = basis @ basis.T``.
    """

    mean: np.ndarray
    basis: np.ndarray

    name = "subspace"
    capabilities = frozenset({GRADIENT, DECOMPOSITION})

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        basis = np.array(self.basis, dtype=float)
        if basis.ndim == 1:
            basis = basis[:, None]
        d, q = basis.shape
        if mean.shape != (d,):
            raise ValueError("mean and basis disagree on the input dimension")
        if not 1 <= q < d:
            raise ValueError(f"latent dimension must satisfy 1 <= q < d, got q={q}, d={d}")
        if not np.allclose(basis.T @ basis, np.eye(q), atol=1e-10, rtol=0):
            raise ValueError("basis columns must be orthonormal")
        mean.setflags(write=False)
        basis.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "d", d)

    @property
    def q(self) -> int:
        return self.basis.shape[1]

    def residual(self, x):
        rows, single = _batch(x, self.d)
        c = rows - self.mean
        r = c - (c @ self.basis) @ self.basis.T
        return r[0] if single else r

    def reconstruct(self, x):
        x = np.asarray(x, dtype=float)
        return x - self.residual(x)

    def score(self, x):
        r = self.residual(x)
        return float(r @ r) if r.ndim == 1 else np.einsum("ni,ni->n", r, r)

    recon_error = score

    def gradient(self, x):
        return 2.0 * self.residual(x)

    def per_feature(self, x):
        return self.residual(x) ** 2

    def marginal_score(self, x, subset):
        # sum of squared residual components over the subset
        idx = _subset_index(subset, self.d)
        return self.per_feature(x)[..., idx].sum(axis=-1)

    def to_dict(self):
        return {"q": self.q, "mean": self.mean.tolist(), "basis": self.basis.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["mean"]), np.asarray(obj["basis"]))


def gmm_energy(model: GmmModel, x):
    return model.score(x)


def gmm_energy_gradient(model: GmmModel, x):
    return model.gradient(x)


def gmm_marginal_energy(model: GmmModel, x, subset):
    return model.marginal_score(x, subset)


def recon_error(model: SubspaceModel, x):
    return model.score(x)


def recon_error_gradient(model: SubspaceModel, x):
    return model.gradient(x)


def recon_error_per_feature(model: SubspaceModel, x):
    return model.per_feature(x)


def _rows(train):
    return train.rows if isinstance(train, Dataset) else np.atleast_2d(np.asarray(train, dtype=float))


def _kmeanspp(X, K, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


class _Degenerate(Exception):
    pass


def _m_step(X, resp, ridge):
    n, d = X.shape
    nk = resp.sum(axis=0)
    if np.any(nk < 1.0):
        raise _Degenerate
    weights = nk / n
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = X - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k]
        covs[k].flat[:: d + 1] += ridge
    return weights / weights.sum(), means, covs


def _em_run(X, K, rng, max_iter, ridge, tol):
    centers = _kmeanspp(X, K, rng)
    nearest = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(K)[nearest]
    model = GmmModel(*_m_step(X, resp, ridge))
    trace = []
    for _ in range(max_iter):
        lc = model.component_log_density(X)
        lse = logsumexp(lc, axis=1, keepdims=True)
        ll = float(lse.mean())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            break
        trace.append(ll)
        resp = np.exp(lc - lse)
        model = GmmModel(*_m_step(X, resp, ridge))
    else:
        trace.append(float(logsumexp(model.component_log_density(X), axis=1).mean()))
    return model, trace


def fit_gmm(train, K: int, seed=0, max_iter: int = 500, ridge: float = 1e-6, tol: float = 1e-7,
            n_init: int = 3, max_reseed: int = 3) -> GmmModel:
    """Fit a full-covariance GMM by EM.

    Means are seeded k-means++ style; ``n_init`` independent runs are made and
    the one with the highest final mean log-likelihood is kept. A run whose
    component collapses below one row of responsibility mass is re-seeded, at
    most ``max_reseed`` times. ``ridge`` is added to every covariance diagonal
    in each M-step. The returned model carries the per-iteration mean train
    log-likelihood in ``log_likelihood_trace``.
    """
    X = _rows(train)
    n, d = X.shape
    if K < 1:
        raise FitError("K must be at least 1")
    if n <= K * d:
        raise FitError(f"need more than K*d = {K * d} rows to fit {K} full covariances, got {n}")
    rng = np.random.default_rng(seed)
    best, best_ll = None, -np.inf
    for run in range(n_init):
        for attempt in range(max_reseed + 1):
            try:
                model, trace = _em_run(X, K, rng, max_iter, ridge, tol)
            except (_Degenerate, ValueError):
                log.debug("EM run %d attempt %d degenerate; re-seeding", run, attempt)
                continue
            if trace[-1] > best_ll:
                best_ll = trace[-1]
                best = GmmModel(model.weights, model.means, model.covariances, tuple(trace))
            break
    if best is None:
        raise FitError(f"EM failed for K={K}: components kept collapsing after {max_reseed} re-seeds")
    return best


def fit_subspace(train, q: int) -> SubspaceModel:
    """Mean and top-``q`` principal directions of the training rows."""
    X = _rows(train)
    n, d = X.shape
    if not 1 <= q < d:
        raise ValueError(f"q must satisfy 1 <= q < d={d}, got {q}")
    if n <= q:
        raise ValueError(f"need more than q={q} rows, got {n}")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = vt[:q].T
    # deterministic sign: largest-magnitude entry of each column positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(q)])
    return SubspaceModel(mean, basis * flip)


def select_model(candidates, valid) -> ScoreModel:
    """Pick the candidate with the lowest mean score on the validation rows.

    For GMMs this is the highest validation likelihood, for subspace models
    the lowest validation reconstruction error.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate models")
    if len(candidates) == 1:
        return candidates[0]
    X = _rows(valid)
    means = [float(np.mean(c.score(X))) for c in candidates]
    return candidates[int(np.argmin(means))]


def model_to_dict(model: ScoreModel) -> dict:
    if isinstance(model, GmmModel):
        kind = "gmm"
    elif isinstance(model, SubspaceModel):
        kind = "subspace"
    else:
        raise ModelFormatError(f"cannot serialize detector of type {type(model).__name__}")
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": kind, "d": model.d,
            "params": model.to_dict()}


def model_from_dict(obj, expected_d=None) -> ScoreModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not an ashap model file")
    if obj.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {obj.get('version')!r}")
    kind = obj.get("kind")
    cls = {"gmm": GmmModel, "subspace": SubspaceModel}.get(kind)
    if cls is None:
        raise ModelFormatError(f"unknown detector kind {kind!r}")
    try:
        model = cls.from_dict(obj["params"])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"invalid {kind} parameters: {exc}") from None
    if model.d != obj.get("d"):
        raise ModelFormatError(f"declared d={obj.get('d')} but parameters have d={model.d}")
    if expected_d is not None and model.d != expected_d:
        raise ModelFormatError(f"model has d={model.d}, expected d={expected_d}")
    return model


def save_model(model: ScoreModel, path, extra: dict | None = None) -> None:
    """Write a detector (plus optional metadata) as JSON text."""
    obj = model_to_dict(model)
    if extra:
        obj["meta"] = extra
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_model(path, expected_d=None):
    """Return ``(model, meta)`` from a file written by :func:`save_model`."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(obj, expected_d), obj.get("meta", {})
