"""Per-class similarity scores and the episode loss they induce.

Three scores are produced for a query against a class:

* Euclidean: negative squared distance to the class prototype.
* Cosine: dot product over the product of norms.
* MLL: sum_i log(lambda_i) - lambda . f(query), the log-likelihood of the
  query under a per-class, per-feature exponential model whose rates are
  estimated from the support set and clipped at lambda_max.

lambda_max defaults differ by use: 40 for evaluation, 100 when computing the
loss, both overridable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAMBDA_MAX_EVAL = 40.0
LAMBDA_MAX_LOSS = 100.0

METRICS = ("euclid", "cosine", "mll")


@dataclass(frozen=True)
class ClassModel:
    """Prototype and clipped exponential rates for one class."""

    class_id: int
    prototype: np.ndarray  # (dim,) float64
    lam: np.ndarray  # (dim,) float64, in (0, lambda_max]
    lambda_max: float


@dataclass(frozen=True)
class ScoreTriple:
    """(euclidean, cosine, mll) scores of one query against one class."""

    alpha_euc: float
    alpha_cos: float
    alpha_mll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_euc, self.alpha_cos, self.alpha_mll])


@dataclass(frozen=True)
class LossGradient:
    """Partial derivatives of the episode loss w.r.t. every feature entry."""

    support: np.ndarray  # (N, K, dim)
    queries: np.ndarray  # (M, dim)


def prototype(support_features) -> np.ndarray:
    """Arithmetic mean of the support features, per coordinate."""
    feats = np.asarray(support_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("support set must be a nonempty list of equal-length vectors")
    return feats.mean(axis=0)


def _lam_from_mean(mean_features: np.ndarray, lambda_max: float) -> np.ndarray:
    # Reciprocal of the mean equals the exponential MLE K/sum; sharing this
    # helper with the transductive prototype updates keeps refits bit-identical.
    with np.errstate(divide="ignore"):
        lam = np.where(mean_features > 0, 1.0 / mean_features, np.inf)
    return np.minimum(lam, lambda_max)


def estimate_lambda(support_features, lambda_max: float = LAMBDA_MAX_EVAL) -> np.ndarray:
    """Clipped exponential-rate MLE from the support set.

    A zero feature column would send the rate to infinity; it maps to
    lambda_max, the limiting case of the clip.
    """
    if not lambda_max > 0:
        raise ValueError("lambda_max must be positive")
    feats = np.asarray(support_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("support set must be a nonempty list of equal-length vectors")
    if (feats < 0).any():
        raise ValueError("negative feature value; exponential rates require f >= 0")
    return _lam_from_mean(feats.mean(axis=0), lambda_max)


def build_class_models(
    support: np.ndarray,
    class_ids,
    lambda_max: float = LAMBDA_MAX_EVAL,
) -> list[ClassModel]:
    """One ClassModel per support class; `support` is (N, K, dim)."""
    return [
        ClassModel(
            class_id=int(class_ids[j]),
            prototype=prototype(support[j]),
            lam=estimate_lambda(support[j], lambda_max),
            lambda_max=lambda_max,
        )
        for j in range(support.shape[0])
    ]


def mll_score(model: ClassModel, query) -> float:
    """sum_i log(lambda_i) - lambda . f(query)."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != model.lam.shape:
        raise ValueError(f"query dim {q.shape} != model dim {model.lam.shape}")
    if (q < 0).any():
        raise ValueError("mll score requires nonnegative query features")
    return float(np.log(model.lam).sum() - model.lam @ q)


def euclidean_score(proto, query) -> float:
    """Negative squared Euclidean distance (higher = more similar)."""
    p = np.asarray(proto, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    d = q - p
    return float(-(d @ d))


def cosine_score(proto, query) -> float:
    """Dot product over the product of Euclidean norms."""
    p = np.asarray(proto, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ == 0.0 or nq == 0.0:
        raise ValueError("cosine score undefined for a zero-norm vector")
    return float((p @ q) / (np_ * nq))


def mll_score_matrix(lam: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """(M, N) MLL scores from per-class rates `lam` (N, dim)."""
    return np.log(lam).sum(axis=1)[None, :] - queries @ lam.T


def euclidean_score_matrix(protos: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - protos[None, :, :]
    return -np.einsum("mnd,mnd->mn", diff, diff)


def cosine_score_matrix(protos: np.ndarray, queries: np.ndarray) -> np.ndarray:
    pn = np.linalg.norm(protos, axis=1)
    qn = np.linalg.norm(queries, axis=1)
    if (pn == 0).any() or (qn == 0).any():
        raise ValueError("cosine score undefined for a zero-norm vector")
    return (queries @ protos.T) / (qn[:, None] * pn[None, :])


def score_matrix(episode, metric: str, lambda_max: float = LAMBDA_MAX_EVAL) -> np.ndarray:
    """(M, N) scores of every query against every episode class."""
    if metric == "mll":
        if (episode.support < 0).any() or (episode.queries < 0).any():
            raise ValueError("mll metric requires nonnegative features")
        lam = np.stack(
            [estimate_lambda(episode.support[j], lambda_max) for j in range(episode.n_way)]
        )
        return mll_score_matrix(lam, episode.queries)
    protos = episode.support.mean(axis=1)
    if metric == "euclid":
        return euclidean_score_matrix(protos, episode.queries)
    if metric == "cosine":
        return cosine_score_matrix(protos, episode.queries)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def argmax_lowest_id(scores: np.ndarray, class_ids=None) -> np.ndarray:
    """Row-wise argmax; exact ties resolve to the lowest class id.

    `scores` is (M, N); `class_ids` maps local columns to original ids
    (defaults to 0..N-1, where lowest column wins).
    """
    scores = np.asarray(scores)
    pred = scores.argmax(axis=1)
    is_max = scores == scores.max(axis=1, keepdims=True)
    tied = is_max.sum(axis=1) > 1
    if tied.any():
        ids = np.arange(scores.shape[1]) if class_ids is None else np.asarray(class_ids)
        for m in np.nonzero(tied)[0]:
            cand = np.nonzero(is_max[m])[0]
            pred[m] = cand[np.argmin(ids[cand])]
    return pred


def classify_inductive(
    episode, metric: str, lambda_max: float = LAMBDA_MAX_EVAL
) -> np.ndarray:
    """Episode-local label for each query: the class maximizing the score."""
    scores = score_matrix(episode, metric, lambda_max)
    return argmax_lowest_id(scores, episode.class_ids)


def softmax_posterior(scores) -> np.ndarray:
    """Posterior over classes from raw scores; shifted for stability."""
    a = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError("softmax requires finite scores")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def episode_loss(episode, lambda_max: float = LAMBDA_MAX_LOSS) -> float:
    """Average episode loss: -(1/(N*M)) sum_m log p(true class of query m).

    The 1/(N*M) normalizer is used verbatim even though the sum runs over the
    M queries only, so a uniform posterior yields log(N)/N.
    """
    alpha = score_matrix(episode, "mll", lambda_max)
    m = episode.num_queries
    if m == 0:
        raise ValueError("episode has no queries")
    shifted = alpha - alpha.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = logp[np.arange(m), episode.hidden_labels]
    return float(-picked.sum() / (episode.n_way * m))


def loss_feature_gradient(
    episode, lambda_max: float = LAMBDA_MAX_LOSS
) -> LossGradient:
    """Analytic gradient of episode_loss w.r.t. every feature entry.

    Rate clipping acts as a stop-gradient: coordinates whose lambda sits at
    lambda_max (including zero support columns) contribute zero derivative
    through lambda.
    """
    n, k, dim = episode.support.shape
    m = episode.num_queries
    mean_feats = episode.support.mean(axis=1)  # (N, dim)
    lam = _lam_from_mean(mean_feats, lambda_max)
    clipped = lam >= lambda_max

    alpha = mll_score_matrix(lam, episode.queries)
    p = softmax_posterior(alpha)
    g = p.copy()
    g[np.arange(m), episode.hidden_labels] -= 1.0
    g /= n * m  # dJ/dalpha, (M, N)

    query_grad = -(g @ lam)

    # dJ/dlam[c,i] = sum_m g[m,c] * (1/lam[c,i] - q[m,i])
    dJ_dlam = g.sum(axis=0)[:, None] / lam - g.T @ episode.queries
    # unclipped lam = 1/mean: dlam/ds[c,k,i] = -lam^2 / K, same for every shot
    dlam_ds = np.where(clipped, 0.0, -(lam**2) / k)
    support_grad = np.broadcast_to(
        (dJ_dlam * dlam_ds)[:, None, :], (n, k, dim)
    ).copy()
    return LossGradient(support=support_grad, queries=query_grad)
