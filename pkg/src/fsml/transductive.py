"""Probability-weighted iterative prototype refinement for query batches.

Starting from the inductive MLL assignment, each round weights every query
feature by the exponential CDF at its assigned class, folds the weighted
query average into the class prototype, refits the clipped rates from the
new prototypes, and rescores the whole batch. The batch as a whole informs
every prediction, which is what makes the method transductive, and the
per-feature weights keep it stable when the query batch is imbalanced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import (
    LAMBDA_MAX_EVAL,
    _lam_from_mean,
    argmax_lowest_id,
    estimate_lambda,
    mll_score_matrix,
    prototype,
)


@dataclass
class TransductiveState:
    """Mutable per-episode state of the refinement loop."""

    prototypes: np.ndarray  # (N, dim)
    lam: np.ndarray  # (N, dim), clipped
    assignments: np.ndarray  # (M,) episode-local labels
    initial_assignments: np.ndarray  # (M,) inductive MLL labels
    iteration: int
    eta: float
    max_iters: int
    lambda_max: float


def cdf_weight(lam_c, query) -> np.ndarray:
    """Elementwise exponential CDF 1 - exp(-lambda * f), in [0, 1]."""
    lam_c = np.asarray(lam_c, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if lam_c.shape[-1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: {lam_c.shape} vs {q.shape}")
    return 1.0 - np.exp(-lam_c * q)


def weighted_prototype(assigned_queries, weights, raw_sum: bool = False) -> np.ndarray:
    """Per-coordinate weighted average of the assigned query features.

    A coordinate whose weights sum to zero falls back to the unweighted mean
    of that coordinate, which keeps the result a convex combination. With
    `raw_sum` the literal weighted sum is returned instead (scales with the
    number of assigned queries; for comparison runs only).
    """
    f = np.asarray(assigned_queries, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("need at least one assigned query")
    if w.shape != f.shape:
        raise ValueError(f"weights shape {w.shape} != features shape {f.shape}")
    num = (w * f).sum(axis=0)
    if raw_sum:
        return num
    den = w.sum(axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), f.mean(axis=0))


def run_transductive(
    episode,
    lambda_max: float = LAMBDA_MAX_EVAL,
    iters: int = 10,
    eta: float = 0.5,
    eq14_raw_sum: bool = False,
) -> TransductiveState:
    """Full refinement loop; returns the final state."""
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if (episode.support < 0).any() or (episode.queries < 0).any():
        raise ValueError("transductive refinement requires nonnegative features")

    n = episode.n_way
    protos = np.stack([prototype(episode.support[j]) for j in range(n)])
    lam = np.stack([estimate_lambda(episode.support[j], lambda_max) for j in range(n)])
    alpha = mll_score_matrix(lam, episode.queries)
    assign = argmax_lowest_id(alpha, episode.class_ids)
    initial = assign.copy()

    for it in range(iters):
        weights = cdf_weight(lam[assign], episode.queries)  # (M, dim)
        for j in range(n):
            mask = assign == j
            if not mask.any():
                continue  # class lost all queries: prototype stays put this round
            g = weighted_prototype(episode.queries[mask], weights[mask], eq14_raw_sum)
            protos[j] = protos[j] + eta * (g - protos[j])
        lam = _lam_from_mean(protos, lambda_max)
        alpha = mll_score_matrix(lam, episode.queries)
        assign = argmax_lowest_id(alpha, episode.class_ids)

    return TransductiveState(
        prototypes=protos,
        lam=lam,
        assignments=assign,
        initial_assignments=initial,
        iteration=iters,
        eta=eta,
        max_iters=iters,
        lambda_max=lambda_max,
    )


def transductive_classify(
    episode,
    lambda_max: float = LAMBDA_MAX_EVAL,
    iters: int = 10,
    eta: float = 0.5,
    eq14_raw_sum: bool = False,
) -> np.ndarray:
    """Episode-local label for each query after the refinement loop."""
    return run_transductive(episode, lambda_max, iters, eta, eq14_raw_sum).assignments
