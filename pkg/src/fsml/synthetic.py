"""Synthetic embedding stores with known exponential class distributions.

Every feature of class c is drawn i.i.d. from Exp(lambda[c, i]) with rates
drawn once per (class, feature) from a log-uniform law. Because the
generative model is known exactly, the Bayes-optimal classifier is available
as an oracle that upper-bounds every estimator built on the same data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .store import EmbeddingStore

DEFAULT_LAMBDA_LO = 0.5
DEFAULT_LAMBDA_HI = 5.0


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    dim: int
    samples_per_class: int
    lambda_lo: float = DEFAULT_LAMBDA_LO
    lambda_hi: float = DEFAULT_LAMBDA_HI
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes, dim, samples_per_class must be positive")
        if not self.lambda_lo > 0:
            raise ValueError("lambda_lo must be positive")
        if self.lambda_hi < self.lambda_lo:
            raise ValueError("lambda_hi must be >= lambda_lo")


@dataclass(frozen=True)
class GroundTruth:
    """True per-(class, feature) exponential rates of a generated store."""

    lam: np.ndarray  # (num_classes, dim) float64

    @property
    def num_classes(self) -> int:
        return self.lam.shape[0]

    @property
    def dim(self) -> int:
        return self.lam.shape[1]


def generate(spec: SyntheticSpec) -> tuple[EmbeddingStore, GroundTruth]:
    """Deterministic store + ground truth for `spec`."""
    rng = np.random.default_rng(spec.seed)
    lam = np.exp(
        rng.uniform(
            np.log(spec.lambda_lo),
            np.log(spec.lambda_hi),
            size=(spec.num_classes, spec.dim),
        )
    )
    blocks = []
    for c in range(spec.num_classes):
        raw = rng.exponential(1.0, size=(spec.samples_per_class, spec.dim))
        blocks.append(raw / lam[c])
    features = np.concatenate(blocks).astype(np.float32)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    store = EmbeddingStore(dim=spec.dim, features=features, labels=labels, nonneg=True)
    return store, GroundTruth(lam=lam)


def save_truth(truth: GroundTruth, path) -> None:
    doc = {
        "num_classes": truth.num_classes,
        "dim": truth.dim,
        "lambda": truth.lam.tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_truth(path) -> GroundTruth:
    doc = json.loads(Path(path).read_text())
    lam = np.asarray(doc["lambda"], dtype=np.float64)
    if lam.shape != (doc["num_classes"], doc["dim"]):
        raise ValueError(f"{path}: lambda matrix shape mismatch")
    return GroundTruth(lam=lam)


def truth_path_for(store_path) -> Path:
    p = Path(store_path)
    return p.with_name(p.stem + ".truth.json")


def bayes_oracle_classify(truth: GroundTruth, query, candidate_classes) -> int:
    """Most likely candidate class under the TRUE rates, no clipping.

    Deliberately written as a plain scalar loop: this is the independent
    oracle side of the dual-route checks and must not share kernels with the
    production scorer. Ties break to the lowest class id.
    """
    import math

    q = np.asarray(query, dtype=np.float64)
    if (q < 0).any():
        raise ValueError("oracle requires nonnegative query features")
    best_id = None
    best_score = -math.inf
    for cid in sorted(int(c) for c in candidate_classes):
        if not 0 <= cid < truth.num_classes:
            raise ValueError(f"unknown candidate class {cid}")
        row = truth.lam[cid]
        score = 0.0
        for i in range(truth.dim):
            score += math.log(row[i]) - row[i] * q[i]
        if score > best_score:
            best_score = score
            best_id = cid
    if best_id is None:
        raise ValueError("no candidate classes given")
    return best_id
