"""Synthetic-anomaly localization benchmark and ranking metrics."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ashap.baselines import make_interpreter
from ashap.data import DataSplits, inject_anomaly
from ashap.detectors import ScoreModel
from ashap.errors import MetricError
from ashap.shapley import Attribution

DEFAULT_HITS = (1, 3)


def rank_order(scores) -> np.ndarray:
    """Feature indices sorted by score descending, ties by ascending index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(len(scores)), -scores))


def _rank_of(scores, truth) -> int:
    order = rank_order(scores)
    truths = {int(truth)} if np.isscalar(truth) else {int(t) for t in truth}
    if not truths:
        raise MetricError("empty ground truth")
    positions = [int(np.flatnonzero(order == t)[0]) for t in truths if 0 <= t < len(order)]
    if len(positions) != len(truths):
        raise MetricError(f"ground-truth index out of range for d={len(order)}")
    return min(positions) + 1


def reciprocal_rank(scores, truth) -> float:
    """1 / rank of the ground-truth feature; for several truths, the best-ranked one counts."""
    return 1.0 / _rank_of(scores, truth)


def hits_at_n(scores, truth, n: int) -> int:
    d = len(scores)
    if not 1 <= n <= d:
        raise ValueError(f"n must lie in [1, {d}], got {n}")
    return int(_rank_of(scores, truth) <= n)


def auroc(scores, truth_set) -> float:
    """Rank-based AUROC with the truth features as positives; ties count one half."""
    scores = np.asarray(scores, dtype=float)
    pos = np.zeros(len(scores), dtype=bool)
    pos[[int(t) for t in truth_set]] = True
    if not pos.any() or pos.all():
        raise MetricError("AUROC needs a non-empty, proper subset of features as positives")
    sp = scores[pos][:, None]
    sn = scores[~pos][None, :]
    return float(np.mean((sp > sn) + 0.5 * (sp == sn)))


def positive_phi_transform(phi) -> np.ndarray:
    """Clamp negative attributions to zero."""
    return np.maximum(np.asarray(phi, dtype=float), 0.0)


@dataclass(frozen=True, eq=False)
class TrialResult:
    trial: int
    base_row_index: int
    perturbed_indices: tuple
    strategy: str
    detector: str
    scores: np.ndarray
    phi0: float | None = None


@dataclass(eq=False)
class MetricsReport:
    strategy: str
    detector: str
    n_trials: int
    d_anom: int
    mrr: float | None
    hits_at: dict
    auroc: float | None
    config: dict = field(default_factory=dict)
    trials: list = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        out = {}
        if self.mrr is not None:
            out["mrr"] = self.mrr
        for n, v in sorted(self.hits_at.items()):
            out[f"hits@{n}"] = v
        if self.auroc is not None:
            out["auroc"] = self.auroc
        return out


def _to_scores(out):
    if isinstance(out, Attribution):
        return out.phi, out.phi0
    return np.asarray(out, dtype=float), None


def _resolve_strategies(strategies, detector, splits, kw):
    resolved = []
    for entry in strategies:
        if isinstance(entry, str):
            fn = make_interpreter(entry, detector, splits.train, **kw)
            resolved.append((entry, lambda x, rec, s, fn=fn: fn(x, s)))
        else:
            name, fn = entry
            resolved.append((name, fn))
    return resolved


def run_synth_benchmark(splits: DataSplits, detector: ScoreModel, strategies, d_anom: int = 1,
                        n_trials: int = 100, seed: int = 0, positive_phi: bool = False,
                        mrr_best_rank: bool = False, hits=DEFAULT_HITS, threads=None,
                        **interp_config) -> dict:
    """Perturb test-normal rows and score how well each strategy localizes the change.

    Each trial draws a base row from ``splits.test_norm`` (with replacement),
    perturbs ``d_anom`` features, and asks every strategy for attributions of
    the perturbed point. Trials use seeds derived from ``(seed, trial)``, so the
    outcome does not depend on ``threads``.

    Args:
        strategies: names understood by :func:`ashap.baselines.make_interpreter`
            or ``(name, fn)`` pairs with ``fn(x, record, seed)`` returning a
            score vector or an :class:`Attribution`.
        positive_phi: clamp negative attributions to zero before ranking.
        mrr_best_rank: report MRR and hits@n for ``d_anom > 1`` using the
            best-ranked perturbed feature.
        interp_config: forwarded to ``make_interpreter`` (gamma, m, k, ig_steps).

    Returns:
        ``{strategy_name: MetricsReport}`` in the order given.
    """
    if n_trials < 1:
        raise MetricError("n_trials must be at least 1")
    test = splits.test_norm
    if len(test) == 0:
        raise ValueError("splits.test_norm is empty")
    d = test.d
    if not 1 <= d_anom <= d:
        raise ValueError(f"d_anom must lie in [1, {d}]")
    interp_config.setdefault("seed", seed)
    resolved = _resolve_strategies(strategies, detector, splits, interp_config)

    def one_trial(t):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(t)]))
        base = int(rng.integers(len(test)))
        rec = inject_anomaly(test.rows[base], d_anom, test.feature_kinds, rng, base_row_index=base)
        trial_seed = int(rng.integers(2 ** 31 - 1))
        results = []
        for name, fn in resolved:
            scores, phi0 = _to_scores(fn(rec.perturbed_point, rec, trial_seed))
            if scores.shape != (d,):
                raise ValueError(f"strategy {name} returned {scores.shape}, expected ({d},)")
            results.append(TrialResult(t, base, tuple(rec.truth), name, detector.name, scores, phi0))
        return results

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_trial = list(pool.map(one_trial, range(n_trials)))
    else:
        per_trial = [one_trial(t) for t in range(n_trials)]

    config = {"d_anom": d_anom, "n_trials": n_trials, "seed": seed, "positive_phi": positive_phi,
              **{k: v for k, v in interp_config.items() if k != "threads"}}
    reports = {}
    for j, (name, _) in enumerate(resolved):
        trials = [tr[j] for tr in per_trial]
        reports[name] = summarize(trials, d_anom, positive_phi, mrr_best_rank, hits, name,
                                  detector.name, config)
    return reports


def summarize(trials, d_anom, positive_phi=False, mrr_best_rank=False, hits=DEFAULT_HITS,
              strategy="", detector="", config=None) -> MetricsReport:
    if not trials:
        raise MetricError("no trials to summarize")
    d = len(trials[0].scores)
    rr, hit, auc = [], {n: [] for n in hits if n <= d}, []
    for tr in trials:
        s = positive_phi_transform(tr.scores) if positive_phi else tr.scores
        truth = tr.perturbed_indices
        if d_anom == 1 or mrr_best_rank:
            rr.append(reciprocal_rank(s, truth))
            for n in hit:
                hit[n].append(hits_at_n(s, truth, n))
        if len(truth) < d:
            auc.append(auroc(s, truth))
    return MetricsReport(
        strategy=strategy, detector=detector, n_trials=len(trials), d_anom=d_anom,
        mrr=float(np.mean(rr)) if rr else None,
        hits_at={n: float(np.mean(v)) for n, v in hit.items() if v},
        auroc=float(np.mean(auc)) if auc else None,
        config=dict(config or {}), trials=list(trials),
    )


def gamma_sweep(splits: DataSplits, detector, gammas, d_anom: int = 1, n_trials: int = 100,
                seed: int = 0, **kw) -> list:
    """ASH benchmark at each gamma with identical trial seeds.

    ``detector`` may be a trained model or a zero-argument factory returning one.
    Returns ``[(gamma, MetricsReport), ...]`` in grid order.
    """
    gammas = list(gammas)
    if not gammas:
        raise ValueError("gamma grid is empty")
    model = detector if isinstance(detector, ScoreModel) else detector()
    rows = []
    for g in gammas:
        rep = run_synth_benchmark(splits, model, ["ash"], d_anom=d_anom, n_trials=n_trials,
                                  seed=seed, gamma=float(g), **kw)["ash"]
        rows.append((float(g), rep))
    return rows


# ---------------------------------------------------------------- report output

CSV_FIELDS = ("strategy", "detector", "metric", "value", "n_trials", "seed")


def report_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        for metric, value in rep.metrics().items():
            rows.append({"strategy": rep.strategy, "detector": rep.detector, "metric": metric,
                         "value": repr(float(value)), "n_trials": rep.n_trials,
                         "seed": rep.config.get("seed")})
    return rows


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(report_rows(reports))
    return buf.getvalue()


def trials_to_csv(reports) -> str:
    """Per-trial attributions, one row per (strategy, trial)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    reports = list(reports)
    d = len(reports[0].trials[0].scores) if reports and reports[0].trials else 0
    w.writerow(["strategy", "detector", "trial", "base_row", "perturbed"] + [f"phi_{i}" for i in range(d)])
    for rep in reports:
        for tr in rep.trials:
            w.writerow([rep.strategy, rep.detector, tr.trial, tr.base_row_index,
                        " ".join(map(str, tr.perturbed_indices))] + [repr(float(v)) for v in tr.scores])
    return buf.getvalue()


def format_table(reports, title=None) -> str:
    """Aligned text table: one row per strategy, one column per metric."""
    reports = list(reports)
    metrics = []
    for rep in reports:
        for k in rep.metrics():
            if k not in metrics:
                metrics.append(k)
    header = ["detector", "strategy"] + metrics
    body = [[rep.detector, rep.strategy] + [f"{rep.metrics()[k]:.3f}" if k in rep.metrics() else "-"
                                            for k in metrics] for rep in reports]
    return _align(header, body, title, n_text=2)


def format_gamma_table(sweep, metric="mrr", title=None) -> str:
    header = ["gamma", metric]
    body = [[f"{g:g}", f"{rep.metrics().get(metric, float('nan')):.3f}"] for g, rep in sweep]
    return _align(header, body, title, n_text=0)


def _align(header, body, title, n_text):
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = []
    if title:
        lines.append(title)
    fmt = lambda row: "  ".join(str(c).ljust(w) if i < n_text else str(c).rjust(w)
                                for i, (c, w) in enumerate(zip(row, widths)))
    lines.append(fmt(header))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend(fmt(r) for r in body)
    return "\n".join(lines) + "\n"
