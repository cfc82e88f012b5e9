"""Distribution analyses emitted as plot-ready data (CSV, never images).

Covers per-feature histograms with exponential MLE overlays, Gaussian fits
of intra/cross score populations, and cross-metric agreement fractions.
"""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass

import numpy as np

from .fusion import ScoreSampleSet
from .store import EmbeddingStore

DEFAULT_BINS = 60

METRIC_COLUMNS = ("euclid", "cosine", "mll")


@dataclass(frozen=True)
class HistogramDensity:
    """Normalized histogram: sum(density) * bin_size == 1 over covered bins."""

    bin_size: float
    bin_centers: np.ndarray
    densities: np.ndarray
    count: int


@dataclass(frozen=True)
class ExponentialFitReport:
    """Rate MLE of nonnegative samples; lam * mean == 1 when unclipped."""

    lam: float
    count: int
    mean_value: float
    class_id: int | None = None
    feature_index: int | None = None


@dataclass(frozen=True)
class GaussianFit:
    mean: float
    variance: float
    count: int


@dataclass(frozen=True)
class ScoreDistributionReport:
    """Per-metric, per-population Gaussian fits plus histograms."""

    fits: dict[tuple[str, str], GaussianFit]  # (metric, population) -> fit
    histograms: dict[tuple[str, str], HistogramDensity]


@dataclass(frozen=True)
class AgreementReport:
    pairwise: dict[str, float]
    unanimous: float


def _binned_density(
    values: np.ndarray, bin_size: float, origin: float
) -> HistogramDensity:
    # half-open bins [origin + k*B, origin + (k+1)*B): edge samples go up
    idx = np.floor((values - origin) / bin_size).astype(np.int64)
    n_bins = int(idx.max()) + 1
    counts = np.bincount(idx, minlength=n_bins)
    centers = origin + (np.arange(n_bins) + 0.5) * bin_size
    dens = counts / (len(values) * bin_size)
    return HistogramDensity(
        bin_size=float(bin_size),
        bin_centers=centers,
        densities=dens,
        count=len(values),
    )


def histogram_density(values, bin_size: float) -> HistogramDensity:
    """Empirical density of nonnegative samples over bins anchored at 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot histogram an empty sample")
    if not bin_size > 0:
        raise ValueError("bin size must be positive")
    if not np.isfinite(v).all():
        raise ValueError("non-finite sample value")
    if (v < 0).any():
        raise ValueError("feature histogram expects nonnegative values")
    return _binned_density(v, bin_size, origin=0.0)


def fit_exponential(values, class_id=None, feature_index=None) -> ExponentialFitReport:
    """Exponential rate MLE: count over sum."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot fit an empty sample")
    if (v < 0).any():
        raise ValueError("exponential fit expects nonnegative values")
    total = v.sum()
    if not total > 0:
        raise ValueError("all-zero sample has no finite rate estimate")
    return ExponentialFitReport(
        lam=float(len(v) / total),
        count=len(v),
        mean_value=float(v.mean()),
        class_id=class_id,
        feature_index=feature_index,
    )


def class_feature_report(
    store: EmbeddingStore,
    class_id: int,
    feature_index: int,
    bin_size: float | None = None,
) -> tuple[HistogramDensity, ExponentialFitReport]:
    """Histogram + exponential fit of one feature within one class."""
    if class_id not in store.class_index:
        raise ValueError(f"class {class_id} not present in store")
    if not 0 <= feature_index < store.dim:
        raise ValueError(f"feature index {feature_index} out of range [0, {store.dim})")
    rows = store.class_index[class_id]
    values = store.features_f64(rows)[:, feature_index]
    if bin_size is None:
        spread = values.max() - values.min()
        bin_size = spread / DEFAULT_BINS if spread > 0 else 1.0
    hist = histogram_density(values, bin_size)
    fit = fit_exponential(values, class_id=class_id, feature_index=feature_index)
    return hist, fit


def _open_dest(dest):
    if hasattr(dest, "write"):
        return contextlib.nullcontext(dest)
    return open(dest, "w", newline="")


def write_feature_report_csv(dest, hist: HistogramDensity, fit: ExponentialFitReport) -> None:
    """Rows of z, empirical density, and fitted exponential density."""
    fitted = fit.lam * np.exp(-fit.lam * hist.bin_centers)
    with _open_dest(dest) as fh:
        w = csv.writer(fh)
        w.writerow(["z", "empirical_density", "fitted_density"])
        for z, d, fd in zip(hist.bin_centers, hist.densities, fitted):
            w.writerow([repr(float(z)), repr(float(d)), repr(float(fd))])


def _gaussian_fit(values: np.ndarray) -> GaussianFit:
    var = float(values.var(ddof=1)) if values.size > 1 else 0.0
    return GaussianFit(mean=float(values.mean()), variance=var, count=values.size)


def score_distribution_report(samples: ScoreSampleSet) -> ScoreDistributionReport:
    """Univariate Gaussian fits and histograms per metric and population."""
    if len(samples.intra) == 0 or len(samples.cross) == 0:
        raise ValueError("both score populations must be nonempty")
    fits = {}
    hists = {}
    for pop, arr in (("intra", samples.intra), ("cross", samples.cross)):
        for col, metric in enumerate(METRIC_COLUMNS):
            v = arr[:, col]
            fits[(metric, pop)] = _gaussian_fit(v)
            spread = v.max() - v.min()
            b = spread / DEFAULT_BINS if spread > 0 else 1.0
            hists[(metric, pop)] = _binned_density(v, b, origin=float(v.min()))
    return ScoreDistributionReport(fits=fits, histograms=hists)


def write_score_report_csv(dest, report: ScoreDistributionReport) -> None:
    with _open_dest(dest) as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "population", "bin_center", "density", "gauss_mean", "gauss_var"])
        for key in sorted(report.histograms):
            metric, pop = key
            fit = report.fits[key]
            hist = report.histograms[key]
            for z, d in zip(hist.bin_centers, hist.densities):
                w.writerow(
                    [metric, pop, repr(float(z)), repr(float(d)), repr(fit.mean), repr(fit.variance)]
                )


def metric_agreement(pred_euc, pred_cos, pred_mll) -> AgreementReport:
    """Pairwise and unanimous agreement fractions of three prediction lists."""
    a = np.asarray(pred_euc)
    b = np.asarray(pred_cos)
    c = np.asarray(pred_mll)
    if not (a.shape == b.shape == c.shape) or a.ndim != 1:
        raise ValueError("prediction lists must be 1-d and equally long")
    if a.size == 0:
        raise ValueError("prediction lists are empty")
    ab = float((a == b).mean())
    ac = float((a == c).mean())
    bc = float((b == c).mean())
    un = float(((a == b) & (b == c)).mean())
    return AgreementReport(
        pairwise={"euclid_cosine": ab, "euclid_mll": ac, "cosine_mll": bc},
        unanimous=un,
    )
