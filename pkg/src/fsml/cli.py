"""Command-line entry point.

Reports are JSON on stdout (or --out) and embed the full resolved
configuration. Execution details that vary run-to-run (wall time, worker
count) go to stderr so reports stay byte-identical for a fixed seed
regardless of --threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import diagnostics, evaluate, fusion, metrics, synthetic
from .store import StoreFormatError, load_manifest, load_store, restrict_to_split, save_store


def _add_shared(p: argparse.ArgumentParser, store_required: bool = True) -> None:
    p.add_argument("--store", type=Path, required=store_required, help="FSEM embedding store")
    p.add_argument("--manifest", type=Path, help="split manifest JSON")
    p.add_argument("--split", help="split name to restrict to (with --manifest)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads (env FSML_THREADS)")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")


def _add_triple_store(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store-euc", type=Path, help="store embedded by the Euclidean-trained network")
    p.add_argument("--store-cos", type=Path, help="store embedded by the cosine-trained network")
    p.add_argument("--store-mll", type=Path, help="store embedded by the MLL-trained network")


def _load_restricted(path, args):
    store = load_store(path)
    if args.split and not args.manifest:
        raise StoreFormatError("--split requires --manifest")
    if args.manifest:
        if not args.split:
            raise StoreFormatError("--manifest requires --split")
        manifest = load_manifest(args.manifest)
        store = restrict_to_split(store, manifest, args.split)
    return store


def _metric_stores(args) -> fusion.MetricStores:
    triple = [args.store_euc, args.store_cos, args.store_mll]
    if any(triple):
        if not all(triple):
            raise StoreFormatError(
                "give all of --store-euc/--store-cos/--store-mll or none"
            )
        return fusion.MetricStores(
            euc=_load_restricted(args.store_euc, args),
            cos=_load_restricted(args.store_cos, args),
            mll=_load_restricted(args.store_mll, args),
        )
    if args.store is None:
        raise StoreFormatError("--store is required (or the three per-metric stores)")
    return fusion.MetricStores.single(_load_restricted(args.store, args))


def _emit(report: dict, out: Path | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    threads = evaluate.resolve_threads(args.threads)
    stores = _metric_stores(args)
    model = None
    if args.metric == "combined":
        if not args.fusion:
            raise StoreFormatError("--metric combined requires --fusion MODEL.json")
        model = fusion.load_fusion(args.fusion)
    results = evaluate.run_eval(
        stores,
        args.metric,
        args.n_way,
        args.k_shot,
        args.queries,
        args.episodes,
        args.lambda_max,
        args.seed,
        threads,
        fusion_model=model,
    )
    report = {
        "command": "eval",
        "config": {
            "store": str(args.store) if args.store else None,
            "store_euc": str(args.store_euc) if args.store_euc else None,
            "store_cos": str(args.store_cos) if args.store_cos else None,
            "store_mll": str(args.store_mll) if args.store_mll else None,
            "manifest": str(args.manifest) if args.manifest else None,
            "split": args.split,
            "metric": args.metric,
            "n_way": args.n_way,
            "k_shot": args.k_shot,
            "queries": args.queries,
            "episodes": args.episodes,
            "lambda_max": args.lambda_max,
            "fusion": str(args.fusion) if args.fusion else None,
            "seed": args.seed,
        },
        "results": results,
        "seed": args.seed,
    }
    _emit(report, args.out)
    print(
        f"eval done in {time.perf_counter() - t0:.1f}s ({threads} thread(s))",
        file=sys.stderr,
    )
    return 0


def cmd_transductive(args) -> int:
    t0 = time.perf_counter()
    threads = evaluate.resolve_threads(args.threads)
    if args.store is None:
        raise StoreFormatError("--store is required")
    store = _load_restricted(args.store, args)
    results = evaluate.run_transductive(
        store,
        args.n_way,
        args.k_shot,
        args.query_total,
        args.dirichlet_a,
        args.iters,
        args.eta,
        args.episodes,
        args.lambda_max,
        args.seed,
        threads,
        eq14_raw_sum=args.eq14_raw_sum,
    )
    report = {
        "command": "transductive",
        "config": {
            "store": str(args.store),
            "manifest": str(args.manifest) if args.manifest else None,
            "split": args.split,
            "n_way": args.n_way,
            "k_shot": args.k_shot,
            "query_total": args.query_total,
            "dirichlet_a": args.dirichlet_a,
            "iters": args.iters,
            "eta": args.eta,
            "episodes": args.episodes,
            "lambda_max": args.lambda_max,
            "eq14_raw_sum": args.eq14_raw_sum,
            "seed": args.seed,
        },
        "results": results,
        "seed": args.seed,
    }
    _emit(report, args.out)
    print(
        f"transductive done in {time.perf_counter() - t0:.1f}s ({threads} thread(s))",
        file=sys.stderr,
    )
    return 0


def cmd_fit_fusion(args) -> int:
    stores = _metric_stores(args)
    plan = fusion.EpisodePlan(
        n_way=args.n_way,
        k_shot=args.k_shot,
        queries_per_class=args.queries,
        episodes=args.fit_episodes,
    )
    coll = fusion.collect_scores(stores, plan, args.lambda_max, args.seed)
    model = fusion.fit_fusion(coll.samples)
    if stores.is_degraded:
        model = dataclasses.replace(model, degraded=True)
    fusion.save_fusion(model, args.model_out)
    agree = diagnostics.metric_agreement(
        coll.predictions["euclid"], coll.predictions["cosine"], coll.predictions["mll"]
    )
    report = {
        "command": "fit-fusion",
        "config": {
            "store": str(args.store) if args.store else None,
            "store_euc": str(args.store_euc) if args.store_euc else None,
            "store_cos": str(args.store_cos) if args.store_cos else None,
            "store_mll": str(args.store_mll) if args.store_mll else None,
            "manifest": str(args.manifest) if args.manifest else None,
            "split": args.split,
            "n_way": args.n_way,
            "k_shot": args.k_shot,
            "queries": args.queries,
            "fit_episodes": args.fit_episodes,
            "lambda_max": args.lambda_max,
            "model_out": str(args.model_out),
            "seed": args.seed,
        },
        "results": {
            "n_intra": model.n_intra,
            "n_cross": model.n_cross,
            "ridge_applied": model.ridge_applied,
            "degraded": model.degraded,
            "agreement": {"unanimous": agree.unanimous, **agree.pairwise},
        },
        "seed": args.seed,
    }
    _emit(report, args.out)
    return 0


def cmd_diagnose(args) -> int:
    store = _load_restricted(args.store, args)
    hist, fit = diagnostics.class_feature_report(
        store, args.class_id, args.feature, args.bins
    )
    diagnostics.write_feature_report_csv(args.out or sys.stdout, hist, fit)
    print(
        f"class {args.class_id} feature {args.feature}: "
        f"lambda={fit.lam:.6g} over {fit.count} samples",
        file=sys.stderr,
    )
    return 0


def cmd_synth(args) -> int:
    spec = synthetic.SyntheticSpec(
        num_classes=args.classes,
        dim=args.dim,
        samples_per_class=args.per_class,
        lambda_lo=args.lambda_lo,
        lambda_hi=args.lambda_hi,
        seed=args.seed,
    )
    store, truth = synthetic.generate(spec)
    save_store(store, args.out_store)
    synthetic.save_truth(truth, synthetic.truth_path_for(args.out_store))
    print(
        f"wrote {store.num_samples} samples, dim {store.dim} -> {args.out_store}",
        file=sys.stderr,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsml",
        description="Few-shot evaluation over embedding stores with exponential "
        "max-log-likelihood scoring, score fusion, and transductive refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="inductive accuracy of one metric")
    _add_shared(p, store_required=False)
    _add_triple_store(p)
    p.add_argument("--metric", choices=(*metrics.METRICS, "combined"), default="mll")
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=15, help="queries per class")
    p.add_argument("--episodes", type=int, default=evaluate.DEFAULT_EPISODES)
    p.add_argument("--lambda-max", type=float, default=metrics.LAMBDA_MAX_EVAL)
    p.add_argument("--fusion", type=Path, help="fusion model JSON (combined metric)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transductive", help="imbalanced transductive evaluation")
    _add_shared(p)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--query-total", type=int, default=75)
    p.add_argument("--dirichlet-a", type=float, default=2.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--episodes", type=int, default=evaluate.DEFAULT_EPISODES)
    p.add_argument("--lambda-max", type=float, default=metrics.LAMBDA_MAX_EVAL)
    p.add_argument(
        "--eq14-raw-sum",
        action="store_true",
        help="use the literal weighted sum instead of the weighted average "
        "in the prototype update (comparison runs)",
    )
    p.set_defaults(func=cmd_transductive)

    p = sub.add_parser("fit-fusion", help="fit the Gaussian score-fusion model")
    _add_shared(p, store_required=False)
    _add_triple_store(p)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--fit-episodes", type=int, default=2000)
    p.add_argument("--lambda-max", type=float, default=metrics.LAMBDA_MAX_EVAL)
    p.add_argument("--model-out", type=Path, required=True, help="fusion model JSON path")
    p.set_defaults(func=cmd_fit_fusion)

    p = sub.add_parser("diagnose", help="per-class feature histogram + exponential fit CSV")
    _add_shared(p)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--feature", type=int, required=True)
    p.add_argument("--bins", type=float, default=None, help="bin size (default: range/60)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="generate a synthetic store with known rates")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--lambda-lo", type=float, default=synthetic.DEFAULT_LAMBDA_LO)
    p.add_argument("--lambda-hi", type=float, default=synthetic.DEFAULT_LAMBDA_HI)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", dest="out_store", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
