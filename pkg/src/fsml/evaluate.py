"""Episode-level evaluation loops behind the CLI.

Per-episode accuracies are written into an array slot keyed by episode
index, and the report aggregates that array, so results are independent of
worker count and completion order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fusion, metrics, transductive
from .episodes import rebind_episode, sample_balanced_episode, sample_dirichlet_episode
from .store import EmbeddingStore

DEFAULT_EPISODES = 10_000


def resolve_threads(flag_value: int | None) -> int:
    """--threads flag, falling back to FSML_THREADS, then 1."""
    if flag_value is not None:
        if flag_value < 1:
            raise ValueError("threads must be >= 1")
        return flag_value
    env = os.environ.get("FSML_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("FSML_THREADS must be >= 1")
        return n
    return 1


def _map_episodes(fn, episodes: int, threads: int) -> list:
    if episodes < 1:
        raise ValueError("episode count must be >= 1")
    if threads <= 1:
        return [fn(i) for i in range(episodes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(episodes), chunksize=64))


def accuracy_summary(per_episode: np.ndarray) -> dict:
    """Mean accuracy with a 95% normal-approximation half-width."""
    acc = np.asarray(per_episode, dtype=np.float64)
    n = acc.size
    half = 1.96 * acc.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return {
        "mean_accuracy": float(acc.mean()),
        "ci95_halfwidth": float(half),
        "episodes": int(n),
    }


def run_eval(
    stores: fusion.MetricStores,
    metric: str,
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    episodes: int,
    lambda_max: float,
    seed: int,
    threads: int = 1,
    fusion_model: fusion.FusionModel | None = None,
) -> dict:
    """Inductive accuracy of one metric (or the combined rule) over episodes."""
    if metric == "combined" and fusion_model is None:
        raise ValueError("combined metric requires a fusion model")
    if queries_per_class < 1:
        raise ValueError("queries per class must be >= 1")

    def one(i: int) -> float:
        ep = sample_balanced_episode(
            stores.mll, n_way, k_shot, queries_per_class, seed, i
        )
        if metric == "combined":
            tens = fusion.episode_score_tensor(stores, ep, lambda_max)
            pred = fusion.classify_combined_batch(tens, fusion_model, ep.class_ids)
        else:
            ep_m = ep
            if metric == "euclid" and stores.euc is not stores.mll:
                ep_m = rebind_episode(ep, stores.euc)
            elif metric == "cosine" and stores.cos is not stores.mll:
                ep_m = rebind_episode(ep, stores.cos)
            pred = metrics.classify_inductive(ep_m, metric, lambda_max)
        return float((pred == ep.hidden_labels).mean())

    acc = np.asarray(_map_episodes(one, episodes, threads))
    return {"metric": metric, **accuracy_summary(acc)}


def run_transductive(
    store: EmbeddingStore,
    n_way: int,
    k_shot: int,
    query_total: int,
    concentration: float,
    iters: int,
    eta: float,
    episodes: int,
    lambda_max: float,
    seed: int,
    threads: int = 1,
    eq14_raw_sum: bool = False,
) -> dict:
    """Paired inductive-MLL and transductive accuracies on the same episodes."""
    if query_total < 1:
        raise ValueError("query total must be >= 1")

    def one(i: int) -> tuple[float, float]:
        ep, _ = sample_dirichlet_episode(
            store, n_way, k_shot, query_total, concentration, seed, i
        )
        state = transductive.run_transductive(
            ep, lambda_max, iters, eta, eq14_raw_sum
        )
        ind = float((state.initial_assignments == ep.hidden_labels).mean())
        tra = float((state.assignments == ep.hidden_labels).mean())
        return ind, tra

    pairs = np.asarray(_map_episodes(one, episodes, threads))
    ind, tra = pairs[:, 0], pairs[:, 1]
    delta = tra - ind
    n = delta.size
    delta_se = float(delta.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {
        "inductive_mll": accuracy_summary(ind),
        "transductive": accuracy_summary(tra),
        "gain": {
            "mean": float(delta.mean()),
            "se": delta_se,
        },
    }
