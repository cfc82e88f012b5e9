"""Gaussian fusion of the three metric scores.

Score triples collected on validation episodes are split into intra-class
(query's true class equals the scored class) and cross-class populations.
Each population gets a 3-d Gaussian fit; a query's triple is then ranked by
the Youden-style statistic

    CDF_intra(alpha) - (1 - CDF_cross(alpha))

i.e. true-positive probability minus false-positive probability, and the
class maximizing it wins.

The 3-d Gaussian CDF is evaluated with a deterministic quasi-Monte Carlo
rule: Cholesky whitening followed by sequential conditional sampling over
2^14 scrambled-Sobol points with a fixed internal seed, giving absolute
error well under 1e-3 and bit-identical results for identical inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from . import metrics
from .episodes import rebind_episode, sample_balanced_episode
from .store import EmbeddingStore

QMC_POINTS = 2**14
_QMC_SEED = 0x5EED_FACE
_RIDGE_EPS = 1e-6
MIN_FIT_SAMPLES = 10

_sobol_cache: dict[int, np.ndarray] = {}


def _sobol(d: int) -> np.ndarray:
    if d not in _sobol_cache:
        eng = qmc.Sobol(d=d, scramble=True, seed=_QMC_SEED)
        _sobol_cache[d] = eng.random(QMC_POINTS)
    return _sobol_cache[d]


@dataclass(frozen=True)
class ScoreSampleSet:
    """Intra-class and cross-class score-triple populations."""

    intra: np.ndarray  # (n_intra, 3)
    cross: np.ndarray  # (n_cross, 3)

    def __post_init__(self):
        for name in ("intra", "cross"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise ValueError(f"{name} samples must have shape (n, 3)")
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"non-finite value in {name} samples")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class FusionModel:
    """Gaussian parameters of the intra and cross score populations."""

    mu_intra: np.ndarray
    sigma_intra: np.ndarray
    mu_cross: np.ndarray
    sigma_cross: np.ndarray
    n_intra: int
    n_cross: int
    ridge_applied: bool = False
    degraded: bool = False


@dataclass(frozen=True)
class EpisodePlan:
    """How many episodes of which geometry feed a score collection."""

    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    episodes: int = 2000

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.queries_per_class, self.episodes) < 1:
            raise ValueError("episode plan fields must all be >= 1")


@dataclass(frozen=True)
class MetricStores:
    """Aligned stores embedding the same samples, one per trained metric."""

    euc: EmbeddingStore
    cos: EmbeddingStore
    mll: EmbeddingStore

    def __post_init__(self):
        if not (
            self.euc.same_labeling(self.mll) and self.cos.same_labeling(self.mll)
        ):
            raise ValueError(
                "metric stores must share sample count, order, and labels"
            )

    @classmethod
    def single(cls, store: EmbeddingStore) -> "MetricStores":
        """Degraded mode: all three scores computed on one embedding."""
        return cls(euc=store, cos=store, mll=store)

    @property
    def is_degraded(self) -> bool:
        return self.euc is self.cos is self.mll


@dataclass(frozen=True)
class ScoreCollection:
    samples: ScoreSampleSet
    predictions: dict[str, np.ndarray]  # per-metric inductive labels
    true_labels: np.ndarray


def episode_score_tensor(stores: MetricStores, episode, lambda_max: float) -> np.ndarray:
    """(M, N, 3) score triples, each metric on its own store's embedding.

    `episode` must carry features from stores.mll; the other two metrics
    re-bind the same sample indices to their stores.
    """
    ep_euc = episode if stores.euc is stores.mll else rebind_episode(episode, stores.euc)
    ep_cos = episode if stores.cos is stores.mll else rebind_episode(episode, stores.cos)
    return np.stack(
        [
            metrics.score_matrix(ep_euc, "euclid"),
            metrics.score_matrix(ep_cos, "cosine"),
            metrics.score_matrix(episode, "mll", lambda_max),
        ],
        axis=-1,
    )


def collect_scores(
    stores: MetricStores,
    plan: EpisodePlan,
    lambda_max: float = metrics.LAMBDA_MAX_EVAL,
    master_seed: int = 0,
) -> ScoreCollection:
    """Score triples over sampled episodes, split intra/cross by true label.

    Episodes are index-sampled once on the canonical store and re-bound to
    each metric's store, so all three scores describe the same samples.
    """
    intra, cross = [], []
    preds = {m: [] for m in metrics.METRICS}
    truth = []
    for e in range(plan.episodes):
        ep = sample_balanced_episode(
            stores.mll, plan.n_way, plan.k_shot, plan.queries_per_class, master_seed, e
        )
        tens = episode_score_tensor(stores, ep, lambda_max)  # (M, N, 3)
        m = ep.num_queries
        own = tens[np.arange(m), ep.hidden_labels]  # (M, 3)
        intra.append(own)
        mask = np.ones(tens.shape[:2], dtype=bool)
        mask[np.arange(m), ep.hidden_labels] = False
        cross.append(tens[mask])
        for col, name in enumerate(("euclid", "cosine", "mll")):
            preds[name].append(metrics.argmax_lowest_id(tens[:, :, col], ep.class_ids))
        truth.append(ep.hidden_labels)
    return ScoreCollection(
        samples=ScoreSampleSet(
            intra=np.concatenate(intra), cross=np.concatenate(cross)
        ),
        predictions={k: np.concatenate(v) for k, v in preds.items()},
        true_labels=np.concatenate(truth),
    )


def _regularize(sigma: np.ndarray) -> tuple[np.ndarray, bool]:
    base = _RIDGE_EPS * (np.trace(sigma) / 3.0)
    if base <= 0:
        base = _RIDGE_EPS
    applied = False
    for _ in range(128):
        if np.linalg.eigvalsh(sigma).min() > base:
            return sigma, applied
        sigma = sigma + base * np.eye(3)
        applied = True
    raise ValueError("covariance still singular after ridge regularization")


def fit_fusion(samples: ScoreSampleSet) -> FusionModel:
    """Sample means and unbiased covariances, ridge-regularized to SPD."""
    if len(samples.intra) < MIN_FIT_SAMPLES or len(samples.cross) < MIN_FIT_SAMPLES:
        raise ValueError(
            f"need at least {MIN_FIT_SAMPLES} samples per population, got "
            f"{len(samples.intra)} intra / {len(samples.cross)} cross"
        )
    mu_i = samples.intra.mean(axis=0)
    mu_c = samples.cross.mean(axis=0)
    sig_i, ridge_i = _regularize(np.cov(samples.intra, rowvar=False, ddof=1))
    sig_c, ridge_c = _regularize(np.cov(samples.cross, rowvar=False, ddof=1))
    return FusionModel(
        mu_intra=mu_i,
        sigma_intra=sig_i,
        mu_cross=mu_c,
        sigma_cross=sig_c,
        n_intra=len(samples.intra),
        n_cross=len(samples.cross),
        ridge_applied=ridge_i or ridge_c,
    )


def save_fusion(model: FusionModel, path) -> None:
    doc = {
        "mu_intra": model.mu_intra.tolist(),
        "sigma_intra": model.sigma_intra.tolist(),
        "mu_cross": model.mu_cross.tolist(),
        "sigma_cross": model.sigma_cross.tolist(),
        "n_intra": model.n_intra,
        "n_cross": model.n_cross,
        "ridge_applied": bool(model.ridge_applied),
        "degraded": bool(model.degraded),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_fusion(path) -> FusionModel:
    doc = json.loads(Path(path).read_text())
    return FusionModel(
        mu_intra=np.asarray(doc["mu_intra"], dtype=np.float64),
        sigma_intra=np.asarray(doc["sigma_intra"], dtype=np.float64),
        mu_cross=np.asarray(doc["mu_cross"], dtype=np.float64),
        sigma_cross=np.asarray(doc["sigma_cross"], dtype=np.float64),
        n_intra=int(doc["n_intra"]),
        n_cross=int(doc["n_cross"]),
        ridge_applied=bool(doc["ridge_applied"]),
        degraded=bool(doc.get("degraded", False)),
    )


def _genz_cdf(b: np.ndarray, L: np.ndarray, w: np.ndarray, work=None) -> np.ndarray:
    """Sequential conditional QMC estimate of P(Z <= b) per row of b."""
    d = L.shape[0]
    e1 = ndtr(b[:, 0] / L[0, 0])  # (P,)
    if d == 1:
        return e1
    out = np.zeros(b.shape[0])
    live = e1 > 1e-12  # below this the whole integral is < 1e-12
    if not live.any():
        return out
    bl = b[live]
    p, nq = bl.shape[0], w.shape[0]
    diag = np.diagonal(L)
    b_scaled = bl / diag  # row-wise upper limits in units of L[j,j]
    c = L / diag[:, None]
    ws = [np.ascontiguousarray(w[:, k]) for k in range(d - 1)]
    tiny = 1e-15

    if work is None or work[0].shape[0] < p:
        work = tuple(np.empty((p, nq)) for _ in range(d + 1))
    f, buf, *ybufs = (a[:p] for a in work)
    np.multiply(e1[live][:, None], np.ones(nq)[None, :], out=f)
    e_prev = f  # read-only alias at step one
    ys: list[np.ndarray] = []
    for j in range(1, d):
        np.multiply(e_prev, ws[j - 1][None, :], out=buf)
        np.clip(buf, tiny, 1.0 - tiny, out=buf)
        y = ndtri(buf, out=ybufs[j - 1])
        ys.append(y)
        np.multiply(y, -c[j, j - 1], out=buf)
        for k in range(j - 1):
            buf -= c[j, k] * ys[k]
        buf += b_scaled[:, j][:, None]
        e_prev = ndtr(buf, out=buf)
        np.multiply(f, e_prev, out=f)
    out[live] = f.mean(axis=1)
    return out


def mvn_cdf(x, mu, sigma):
    """P(Z <= x componentwise) for Z ~ N(mu, sigma).

    Accepts a single point (d,) or a batch (P, d); deterministic for
    identical inputs. Componentwise +inf/-inf limits are honored exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    d = mu.shape[0]
    if pts.shape[1] != d or sigma.shape != (d, d):
        raise ValueError("x, mu, sigma dimensions are inconsistent")
    if np.isnan(pts).any():
        raise ValueError("NaN in CDF evaluation point")
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("sigma must be symmetric positive-definite") from exc

    b = pts - mu
    w = _sobol(max(d - 1, 1))
    out = np.empty(pts.shape[0])
    chunk = 512  # keeps the (chunk, 2^14) work arrays memory friendly
    work = None
    if d > 1:
        work = tuple(
            np.empty((min(chunk, pts.shape[0]), QMC_POINTS)) for _ in range(d + 1)
        )
    for lo in range(0, pts.shape[0], chunk):
        out[lo : lo + chunk] = _genz_cdf(b[lo : lo + chunk], L, w, work)
    return float(out[0]) if single else out


def combined_statistic(triples, model: FusionModel) -> np.ndarray:
    """Youden-style statistic CDF_intra - (1 - CDF_cross), in [-1, 1]."""
    t = np.asarray(triples, dtype=np.float64)
    flat = t.reshape(-1, 3)
    phi_i = mvn_cdf(flat, model.mu_intra, model.sigma_intra)
    phi_c = mvn_cdf(flat, model.mu_cross, model.sigma_cross)
    return (phi_i - (1.0 - phi_c)).reshape(t.shape[:-1])


def classify_combined(per_class_triples, model: FusionModel, class_ids=None) -> int:
    """Class whose triple maximizes the combined statistic; ties go low."""
    t = np.asarray(per_class_triples, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
        raise ValueError("expected (N, 3) score triples for one query")
    return int(classify_combined_batch(t[None, :, :], model, class_ids)[0])


def _pareto_survivors(triples: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """(M, N) mask of classes that can still win the combined argmax.

    Both CDFs increase componentwise, so a triple dominated by another class
    (all coordinates <=, and either strictly somewhere or losing the
    lowest-id tie-break on exact equality) can never be the prediction.
    """
    le = (triples[:, :, None, :] <= triples[:, None, :, :]).all(axis=3)
    lt = (triples[:, :, None, :] < triples[:, None, :, :]).any(axis=3)
    beats_tie = ids[None, :] < ids[:, None]  # [i, j]: j wins an exact tie
    dominated = (le & (lt | beats_tie[None, :, :])).any(axis=2)
    return ~dominated


def classify_combined_batch(
    triples: np.ndarray, model: FusionModel, class_ids=None
) -> np.ndarray:
    """Combined prediction for every query of an (M, N, 3) score tensor.

    CDFs are evaluated only for Pareto-maximal triples. The exact statistic
    is monotone, so a dominated class can never truly win; decisions can
    deviate from scoring every class only where the top two statistics sit
    within the quadrature tolerance of each other.
    """
    t = np.asarray(triples, dtype=np.float64)
    m, n, _ = t.shape
    ids = np.arange(n) if class_ids is None else np.asarray(class_ids)
    keep = _pareto_survivors(t, ids)
    stat = np.full((m, n), -np.inf)
    flat = t[keep]
    if flat.size:
        phi_i = mvn_cdf(flat, model.mu_intra, model.sigma_intra)
        phi_c = mvn_cdf(flat, model.mu_cross, model.sigma_cross)
        stat[keep] = phi_i - (1.0 - phi_c)
    return metrics.argmax_lowest_id(stat, ids)
