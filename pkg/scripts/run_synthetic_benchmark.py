#!/usr/bin/env python3
"""Synthetic benchmark: every classifier against the Bayes oracle.

Generates a store with known per-class exponential rates, fits the score
fusion on a validation split, then reports 5-way accuracy for the single
metrics, the combined rule, the transductive refinement, and the oracle.

Example:
    python scripts/run_synthetic_benchmark.py --episodes 2000 --seed 7
"""

import argparse
import time

import numpy as np

from fsml import fusion, metrics, synthetic, transductive
from fsml.episodes import sample_balanced_episode, sample_dirichlet_episode
from fsml.store import SplitManifest, restrict_to_split
from fsml.synthetic import bayes_oracle_classify


def summarize(name, acc):
    acc = np.asarray(acc)
    half = 1.96 * acc.std(ddof=1) / np.sqrt(len(acc))
    print(f"  {name:24s} {100 * acc.mean():6.2f}% +- {100 * half:.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=20)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--fit-episodes", type=int, default=300)
    ap.add_argument("--n-way", type=int, default=5)
    ap.add_argument("--k-shot", type=int, default=1)
    ap.add_argument("--queries", type=int, default=15)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--skip-combined", action="store_true",
                    help="skip the CDF-heavy combined metric")
    args = ap.parse_args()

    spec = synthetic.SyntheticSpec(args.classes, args.dim, args.per_class, seed=args.seed)
    store, truth = synthetic.generate(spec)
    half = args.classes // 2
    man = SplitManifest(
        splits={"val": frozenset(range(half)), "test": frozenset(range(half, args.classes))}
    )
    val = restrict_to_split(store, man, "val")
    test = restrict_to_split(store, man, "test")
    print(f"store: {args.classes} classes x {args.per_class} x dim {args.dim}; "
          f"val {half} classes / test {args.classes - half} classes")

    model = None
    if not args.skip_combined:
        coll = fusion.collect_scores(
            fusion.MetricStores.single(val),
            fusion.EpisodePlan(args.n_way, args.k_shot, args.queries, args.fit_episodes),
            master_seed=args.seed + 1,
        )
        model = fusion.fit_fusion(coll.samples)
        print(f"fusion fit on {model.n_intra} intra / {model.n_cross} cross triples")

    stores = fusion.MetricStores.single(test)
    names = ["euclid", "cosine", "mll", "oracle"]
    acc = {n: [] for n in names}
    tensors, hiddens = [], []
    t0 = time.perf_counter()
    for i in range(args.episodes):
        ep = sample_balanced_episode(test, args.n_way, args.k_shot, args.queries,
                                     args.seed + 2, i)
        tens = fusion.episode_score_tensor(stores, ep, 40.0)
        for col, name in enumerate(("euclid", "cosine", "mll")):
            pred = metrics.argmax_lowest_id(tens[:, :, col], ep.class_ids)
            acc[name].append((pred == ep.hidden_labels).mean())
        hits = sum(
            bayes_oracle_classify(truth, q, ep.class_ids) == ep.class_ids[t]
            for q, t in zip(ep.queries, ep.hidden_labels)
        )
        acc["oracle"].append(hits / ep.num_queries)
        if model is not None:
            tensors.append(tens)
            hiddens.append(ep.hidden_labels)

    print(f"\ninductive {args.n_way}-way {args.k_shot}-shot, "
          f"{args.episodes} episodes ({time.perf_counter() - t0:.0f}s):")
    for n in ("euclid", "cosine", "mll"):
        summarize(n, acc[n])
    if model is not None:
        t0 = time.perf_counter()
        preds = fusion.classify_combined_batch(np.concatenate(tensors), model)
        per_q = (preds == np.concatenate(hiddens)).reshape(args.episodes, -1)
        summarize("combined", per_q.mean(axis=1))
        print(f"  (combined CDF pass took {time.perf_counter() - t0:.0f}s)")
    summarize("bayes oracle", acc["oracle"])

    t0 = time.perf_counter()
    ind, tra = [], []
    for i in range(args.episodes):
        ep, _ = sample_dirichlet_episode(test, args.n_way, args.k_shot, 75, 2.0,
                                         args.seed + 3, i)
        state = transductive.run_transductive(ep, 40.0, 10, 0.5)
        ind.append((state.initial_assignments == ep.hidden_labels).mean())
        tra.append((state.assignments == ep.hidden_labels).mean())
    print(f"\ntransductive, Dirichlet(a=2) 75-query batches "
          f"({time.perf_counter() - t0:.0f}s):")
    summarize("inductive mll", ind)
    summarize("transductive mll", tra)
    gain = np.asarray(tra) - np.asarray(ind)
    print(f"  paired gain {100 * gain.mean():+.2f} points "
          f"(+- {100 * 1.96 * gain.std(ddof=1) / np.sqrt(len(gain)):.2f})")


if __name__ == "__main__":
    main()
