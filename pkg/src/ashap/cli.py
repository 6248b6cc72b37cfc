"""Command-line front end: ``ashap train | attribute | bench``.

Exit codes: 0 success, 2 usage or input error, 3 detector fit failure,
4 strategy/detector capability mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from ashap import bench as benchmod
from ashap.baselines import STRATEGIES, make_interpreter
from ashap.data import (
    NormStats,
    generate_synthetic_gaussian,
    load_csv,
    normalize,
    split,
    split_normal,
)
from ashap.detectors import GRADIENT, fit_gmm, fit_subspace, load_model, save_model, select_model
from ashap.errors import (
    AshapError,
    CapabilityError,
    ConstantFeatureError,
    DataError,
    FitError,
    ModelFormatError,
)

log = logging.getLogger("ashap")

EXIT_OK, EXIT_USAGE, EXIT_FIT, EXIT_CAPABILITY = 0, 2, 3, 4


class UsageError(AshapError):
    pass


def substream(seed: int, name: str) -> int:
    """Named child seed derived from the single ``--seed`` value."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _int_list(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="ashap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; command-line flags take precedence")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="worker cap")

    def detector_args(sp):
        sp.add_argument("--detector", choices=("gmm", "subspace"), default="gmm")
        sp.add_argument("--k", type=_int_list, default=[2, 3, 4], help="GMM component counts to try")
        sp.add_argument("--q", type=_int_list, default=None, help="subspace dimensions to try")
        sp.add_argument("--max-iter", type=int, default=500)
        sp.add_argument("--ridge", type=float, default=1e-6)
        sp.add_argument("--valid-fraction", type=float, default=0.2)

    t = sub.add_parser("train", help="fit a detector on the normal rows of a labeled CSV")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--schema", help="name,kind sidecar file")
    detector_args(t)
    t.add_argument("--out", required=True)

    a = sub.add_parser("attribute", help="attribute the anomaly score of one row")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--data", help="CSV holding the query row (and training rows for ig/ksh/wksh)")
    a.add_argument("--schema")
    a.add_argument("--row", type=int, help="0-based data row to explain")
    a.add_argument("--x", type=_float_list, help="comma-separated query point instead of --row")
    a.add_argument("--normalized", action="store_true", help="the query is already in normalized units")
    a.add_argument("--strategy", choices=STRATEGIES, default="ash")
    a.add_argument("--gamma", type=float, default=0.01)
    a.add_argument("--m", type=int, default=None, help="sampled coalitions (default 2d + 2048)")
    a.add_argument("--ref-k", type=int, default=8, help="references for ksh/wksh")
    a.add_argument("--ig-steps", type=int, default=64)
    a.add_argument("--exhaustive", action="store_true", help="enumerate all coalitions")
    a.add_argument("--out", help="write JSON here instead of stdout")

    b = sub.add_parser("bench", help="synthetic-anomaly localization benchmark")
    common(b)
    b.add_argument("--data")
    b.add_argument("--schema")
    b.add_argument("--synthetic", type=_float_list, metavar="D,RHO,N",
                   help="use generated equicorrelated Gaussian data instead of --data")
    b.add_argument("--test-size", type=int, default=None, help="test rows for --synthetic data")
    detector_args(b)
    b.add_argument("--strategies", type=_str_list, default=["ash", "ig", "ksh", "wksh", "marg", "sfe"])
    b.add_argument("--danom", type=int, default=1)
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--gamma", type=float, default=0.01)
    b.add_argument("--gamma-sweep", type=_float_list, default=None)
    b.add_argument("--m", type=int, default=None)
    b.add_argument("--ref-k", type=int, default=8)
    b.add_argument("--ig-steps", type=int, default=64)
    b.add_argument("--positive-phi", action="store_true", help="clamp negative attributions before ranking")
    b.add_argument("--mrr-best-rank", action="store_true", help="report MRR/hits for d_anom > 1")
    b.add_argument("--out-dir", default=None)
    return p, {"train": t, "attribute": a, "bench": b}


def parse_args(argv):
    parser, subparsers = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((a for a in argv if a in subparsers), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    if command and config_path:
        _apply_config(subparsers[command], read_config(config_path))
    return parser.parse_args(argv)


def _apply_config(sp, cfg):
    """Install config values as parser defaults so explicit flags still win."""
    known = {a.dest: a for a in sp._actions}
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    defaults = {}
    for key, raw in cfg.items():
        action = known[key]
        if action.const is True and action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config {key}={raw!r}: {exc}") from None
            if action.choices and defaults[key] not in action.choices:
                raise UsageError(f"config {key}={raw!r} not in {list(action.choices)}")
    sp.set_defaults(**defaults)
    for a in sp._actions:
        if a.dest in defaults:
            a.required = False


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}


def _load(args, require_label=True):
    if not args.data:
        raise UsageError("--data is required")
    return load_csv(args.data, schema=args.schema, require_label=require_label)


def _fit(args, splits):
    d = splits.d
    if args.detector == "gmm":
        cands = []
        for K in args.k:
            cands.append(fit_gmm(splits.train, K, seed=substream(args.seed, f"em-init-{K}"),
                                 max_iter=args.max_iter, ridge=args.ridge))
        if not cands:
            raise UsageError("--k lists no component counts")
    else:
        qs = args.q or [max(1, min(d - 1, round(d / 2)))]
        cands = [fit_subspace(splits.train, q) for q in qs]
    model = select_model(cands, splits.valid)
    return model, cands


def cmd_train(args):
    data = _load(args)
    splits = split(data, args.valid_fraction, seed=substream(args.seed, "split"))
    splits = normalize(splits)
    model, cands = _fit(args, splits)
    meta = {
        "feature_names": list(data.feature_names),
        "feature_kinds": list(data.feature_kinds),
        "normalization": splits.norm_stats.to_dict(),
        "split": {"valid_fraction": args.valid_fraction, "seed": args.seed, "sizes": {
            k: len(v) for k, v in splits.partitions().items()}},
        "selection": {"candidates": [_describe(c) for c in cands], "selected": _describe(model),
                      "valid_mean_score": [float(np.mean(c.score(splits.valid.rows))) for c in cands]},
        "config": _resolved(args),
    }
    save_model(model, args.out, meta)
    print(json.dumps({"model": str(args.out), "selected": _describe(model), "d": model.d}))
    return EXIT_OK


def _describe(model):
    if hasattr(model, "K"):
        return f"gmm(K={model.K})"
    if hasattr(model, "q"):
        return f"subspace(q={model.q})"
    return model.name


def _train_split_for(args, meta):
    """Recreate the training partition the model was fitted on."""
    data = _load(args, require_label=True)
    sp = meta.get("split", {})
    splits = split(data, sp.get("valid_fraction", 0.2), seed=substream(sp.get("seed", 0), "split"))
    return normalize(splits)


def cmd_attribute(args):
    model, meta = load_model(args.model)
    stats = NormStats.from_dict(meta["normalization"]) if "normalization" in meta else None
    if args.x is not None:
        x = np.asarray(args.x, dtype=float)
    elif args.row is not None:
        data = _load(args, require_label=False)
        if not 0 <= args.row < len(data):
            raise UsageError(f"--row {args.row} out of range (data has {len(data)} rows)")
        x = data.rows[args.row]
    else:
        raise UsageError("give --row (with --data) or --x")
    if len(x) != model.d:
        raise UsageError(f"query has {len(x)} features, model expects {model.d}")
    if stats is not None and not args.normalized:
        x = stats.apply(x)

    if args.strategy in ("ash", "ig") and not model.has(GRADIENT):
        raise CapabilityError(f"{args.strategy} needs gradients; {model.name} detector has none")
    train = None
    if args.strategy in ("ig", "ksh", "wksh"):
        train = _train_split_for(args, meta).train
    interp = make_interpreter(args.strategy, model, train, gamma=args.gamma, m=args.m, k=args.ref_k,
                              ig_steps=args.ig_steps, seed=substream(args.seed, "sampler"),
                              threads=args.threads)
    if args.exhaustive and args.strategy in ("ash", "ksh", "wksh"):
        from ashap.baselines import ash_attribution, ksh_attribution, wksh_attribution
        fn = {"ash": lambda: ash_attribution(model, x, args.gamma, exhaustive=True),
              "ksh": lambda: ksh_attribution(model, x, train, k=args.ref_k, exhaustive=True,
                                             seed=substream(args.seed, "sampler")),
              "wksh": lambda: wksh_attribution(model, x, train, k=args.ref_k, exhaustive=True)}[args.strategy]
        att = fn()
    else:
        att = interp(x)
    out = att.to_dict()
    out["strategy"] = args.strategy
    out["feature_names"] = meta.get("feature_names")
    out["x"] = x.tolist()
    out["score"] = float(model.score(x))
    out["config"] = _resolved(args)
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_bench(args):
    if args.synthetic:
        if len(args.synthetic) != 3:
            raise UsageError("--synthetic takes D,RHO,N")
        d, rho, n = int(args.synthetic[0]), args.synthetic[1], int(args.synthetic[2])
        data = generate_synthetic_gaussian(d, rho, n, seed=substream(args.seed, "data"))
        test_size = args.test_size or max(1, n // 10)
        splits = split_normal(data, test_size, args.valid_fraction, seed=substream(args.seed, "split"))
    else:
        data = _load(args)
        splits = split(data, args.valid_fraction, seed=substream(args.seed, "split"))
    splits = normalize(splits)
    model, _ = _fit(args, splits)
    for s in args.strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; expected a subset of {','.join(STRATEGIES)}")

    trial_seed = substream(args.seed, "trials")
    interp = dict(gamma=args.gamma, m=args.m, k=args.ref_k, ig_steps=args.ig_steps)
    common = dict(d_anom=args.danom, n_trials=args.trials, seed=trial_seed,
                  positive_phi=args.positive_phi, threads=args.threads)
    outputs = {}
    if args.gamma_sweep:
        sweep = benchmod.gamma_sweep(splits, model, args.gamma_sweep, m=args.m,
                                     mrr_best_rank=args.mrr_best_rank, **common)
        metric = "mrr" if args.danom == 1 or args.mrr_best_rank else "auroc"
        table = benchmod.format_gamma_table(sweep, metric, title=f"ASH {metric} by gamma ({_describe(model)})")
        reports = [rep for _, rep in sweep]
        for (g, rep) in sweep:
            rep.strategy = f"ash(gamma={g:g})"
    else:
        results = benchmod.run_synth_benchmark(splits, model, args.strategies,
                                               mrr_best_rank=args.mrr_best_rank, **common, **interp)
        reports = list(results.values())
        table = benchmod.format_table(reports, title=f"d_anom={args.danom}, {args.trials} trials, "
                                                     f"{_describe(model)}")
    outputs["report.csv"] = benchmod.reports_to_csv(reports)
    outputs["trials.csv"] = benchmod.trials_to_csv(reports)
    outputs["report.txt"] = table
    outputs["config.json"] = json.dumps({"config": _resolved(args), "detector": _describe(model),
                                         "trial_seed": trial_seed}, indent=1) + "\n"
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            (out / name).write_text(text, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attribute": cmd_attribute, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"ashap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CapabilityError as exc:
        print(f"ashap: capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (FitError, ConstantFeatureError) as exc:
        print(f"ashap: fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (UsageError, DataError, ModelFormatError, FileNotFoundError, ValueError) as exc:
        print(f"ashap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
