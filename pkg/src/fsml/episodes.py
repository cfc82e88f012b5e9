"""Reproducible N-way K-shot episode sampling.

Every episode is a pure function of (master_seed, episode_index): each draw
derives its own RNG stream through a splitmix-style hash, so evaluations
parallelize without any ordering or thread-count dependence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .store import EmbeddingStore

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_warned_exclusions: set[tuple[int, int]] = set()


@dataclass(frozen=True)
class QueryCounts:
    """Per-class query counts for one episode."""

    counts: np.ndarray  # (n_way,) int64

    def __post_init__(self):
        object.__setattr__(
            self, "counts", np.ascontiguousarray(self.counts, dtype=np.int64)
        )
        if (self.counts < 0).any():
            raise ValueError("query counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    `hidden_labels` hold each query's true class as an episode-local index
    into `class_ids`; they exist for the accuracy scorer only and must never
    reach a classifier.
    """

    n_way: int
    k_shot: int
    class_ids: np.ndarray  # (N,) original store class ids, seeded order
    support: np.ndarray  # (N, K, dim) float64
    queries: np.ndarray  # (M, dim) float64
    hidden_labels: np.ndarray  # (M,) int64, episode-local
    support_indices: np.ndarray  # (N, K) store sample indices
    query_indices: np.ndarray  # (M,) store sample indices
    episode_id: int = 0

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]


def splitmix64(x: int) -> int:
    """One splitmix64 mixing step; full 64-bit avalanche."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def episode_seed(master_seed: int, episode_index: int) -> int:
    return splitmix64(splitmix64(master_seed & _MASK64) ^ (episode_index & _MASK64))


def episode_rng(master_seed: int, episode_index: int) -> np.random.Generator:
    """Independent RNG stream for one (seed, index) pair."""
    return np.random.default_rng(episode_seed(master_seed, episode_index))


def eligible_classes(store: EmbeddingStore, min_samples: int) -> list[int]:
    """Class ids with at least `min_samples` samples, ascending.

    Undersized classes are excluded up front (warned once per store/size)
    instead of failing in the middle of an evaluation run.
    """
    ok = [c for c in store.class_ids if store.class_index[c].size >= min_samples]
    excluded = len(store.class_index) - len(ok)
    if excluded:
        key = (id(store), min_samples)
        if key not in _warned_exclusions:
            _warned_exclusions.add(key)
            log.warning(
                "excluding %d class(es) with fewer than %d samples from episode sampling",
                excluded,
                min_samples,
            )
    return ok


def _draw_episode(
    store: EmbeddingStore,
    n_way: int,
    k_shot: int,
    counts: np.ndarray,
    rng: np.random.Generator,
    episode_id: int,
) -> Episode:
    if n_way < 1 or k_shot < 1:
        raise ValueError("n_way and k_shot must be at least 1")
    if len(counts) != n_way:
        raise ValueError(f"expected {n_way} query counts, got {len(counts)}")
    need = k_shot + int(counts.max()) if len(counts) else k_shot
    pool = eligible_classes(store, need)
    if len(pool) < n_way:
        raise ValueError(
            f"need {n_way} classes with at least {need} samples, store has {len(pool)}"
        )
    class_ids = rng.choice(np.asarray(pool, dtype=np.int64), size=n_way, replace=False)

    support_idx = np.empty((n_way, k_shot), dtype=np.int64)
    query_idx_parts = []
    hidden_parts = []
    for j, cid in enumerate(class_ids):
        bucket = store.class_index[int(cid)]
        picked = rng.choice(bucket, size=k_shot + int(counts[j]), replace=False)
        support_idx[j] = picked[:k_shot]
        query_idx_parts.append(picked[k_shot:])
        hidden_parts.append(np.full(int(counts[j]), j, dtype=np.int64))

    query_idx = (
        np.concatenate(query_idx_parts) if query_idx_parts else np.empty(0, np.int64)
    )
    hidden = np.concatenate(hidden_parts) if hidden_parts else np.empty(0, np.int64)
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        class_ids=class_ids.astype(np.int64),
        support=store.features_f64(support_idx.reshape(-1)).reshape(
            n_way, k_shot, store.dim
        ),
        queries=store.features_f64(query_idx),
        hidden_labels=hidden,
        support_indices=support_idx,
        query_indices=query_idx,
        episode_id=episode_id,
    )


def sample_balanced_episode(
    store: EmbeddingStore,
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    master_seed: int,
    episode_index: int,
) -> Episode:
    """N classes uniformly without replacement, K support + m queries each."""
    counts = np.full(n_way, queries_per_class, dtype=np.int64)
    rng = episode_rng(master_seed, episode_index)
    return _draw_episode(store, n_way, k_shot, counts, rng, episode_index)


def dirichlet_query_counts(
    n_way: int, total: int, concentration: float, rng: np.random.Generator
) -> QueryCounts:
    """Integer query counts from Dirichlet proportions.

    Proportions p ~ Dirichlet(a, ..., a) are turned into integers with
    largest-remainder rounding so the counts sum to `total` exactly.
    """
    if n_way < 1:
        raise ValueError("n_way must be at least 1")
    if total < 0:
        raise ValueError("total must be nonnegative")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    p = rng.dirichlet(np.full(n_way, float(concentration)))
    raw = total * p
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return QueryCounts(counts=base)


def sample_imbalanced_episode(
    store: EmbeddingStore,
    n_way: int,
    k_shot: int,
    counts: QueryCounts,
    master_seed: int,
    episode_index: int,
) -> Episode:
    """As the balanced sampler, but query counts follow `counts`.

    With uniform counts this consumes randomness identically to
    sample_balanced_episode, so the same seed yields the same episode.
    """
    if len(counts.counts) != n_way:
        raise ValueError("counts length must equal n_way")
    rng = episode_rng(master_seed, episode_index)
    return _draw_episode(store, n_way, k_shot, counts.counts, rng, episode_index)


def sample_dirichlet_episode(
    store: EmbeddingStore,
    n_way: int,
    k_shot: int,
    query_total: int,
    concentration: float,
    master_seed: int,
    episode_index: int,
) -> tuple[Episode, QueryCounts]:
    """Imbalanced episode with counts redrawn per episode from one stream."""
    rng = episode_rng(master_seed, episode_index)
    counts = dirichlet_query_counts(n_way, query_total, concentration, rng)
    ep = _draw_episode(store, n_way, k_shot, counts.counts, rng, episode_index)
    return ep, counts


def rebind_episode(episode: Episode, store: EmbeddingStore) -> Episode:
    """Same episode structure with features pulled from an aligned store.

    Used when several stores embed the same underlying samples (one per
    trained metric); labels and sample order must match.
    """
    return Episode(
        n_way=episode.n_way,
        k_shot=episode.k_shot,
        class_ids=episode.class_ids,
        support=store.features_f64(episode.support_indices.reshape(-1)).reshape(
            episode.n_way, episode.k_shot, store.dim
        ),
        queries=store.features_f64(episode.query_indices),
        hidden_labels=episode.hidden_labels,
        support_indices=episode.support_indices,
        query_indices=episode.query_indices,
        episode_id=episode.episode_id,
    )
