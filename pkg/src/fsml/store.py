"""Labeled embedding collections and their on-disk FSEM representation.

FSEM layout (little-endian):

    magic   4 bytes  b"FSEM"
    version u32      = 1
    samples u32      number of rows
    dim     u32      feature dimensionality
    flags   u32      bit 0: features are ReLU-origin (all nonnegative)
    labels  samples x u32
    features samples x dim x f32, row-major in sample order

Features live on disk (and in memory) as float32; every statistic computed
from them is widened to float64 downstream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FSEM"
VERSION = 1
FLAG_NONNEG = 0x1

_HEADER = struct.Struct("<4sIIII")

SPLIT_NAMES = ("train", "val", "test")


class StoreFormatError(ValueError):
    """A FSEM file or split manifest violates the format contract."""


@dataclass
class EmbeddingStore:
    """Immutable collection of labeled feature vectors plus a class index."""

    dim: int
    features: np.ndarray  # (n, dim) float32
    labels: np.ndarray  # (n,) int64
    nonneg: bool = False
    class_index: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise StoreFormatError(f"dim must be positive, got {self.dim}")
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != self.dim:
            raise StoreFormatError(
                f"features must have shape (n, {self.dim}), got {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise StoreFormatError(
                f"labels must have shape ({self.features.shape[0]},), got {self.labels.shape}"
            )
        finite = np.isfinite(self.features).all(axis=1)
        if not finite.all():
            bad = int(np.nonzero(~finite)[0][0])
            raise StoreFormatError(f"non-finite feature value in sample {bad}")
        if self.labels.size and self.labels.min() < 0:
            raise StoreFormatError("negative class label")
        if self.nonneg:
            neg = (self.features < 0).any(axis=1)
            if neg.any():
                bad = int(np.nonzero(neg)[0][0])
                raise StoreFormatError(
                    f"store declared nonnegative but sample {bad} has a negative feature"
                )
        if not self.class_index:
            self.class_index = {
                int(c): np.nonzero(self.labels == c)[0]
                for c in np.unique(self.labels)
            }

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.class_index)

    def features_f64(self, indices) -> np.ndarray:
        """Rows at `indices`, widened to float64 for downstream statistics."""
        return self.features[indices].astype(np.float64)

    def same_labeling(self, other: "EmbeddingStore") -> bool:
        return self.num_samples == other.num_samples and np.array_equal(
            self.labels, other.labels
        )


@dataclass(frozen=True)
class SplitManifest:
    """Disjoint class-id sets per split, with optional display names."""

    splits: dict[str, frozenset[int]]
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.splits:
            if name not in SPLIT_NAMES:
                raise StoreFormatError(f"unknown split name {name!r}")
        seen: dict[int, str] = {}
        for name, ids in self.splits.items():
            for cid in ids:
                if cid in seen:
                    raise StoreFormatError(
                        f"class {cid} appears in both {seen[cid]!r} and {name!r}"
                    )
                seen[cid] = name

    def classes(self) -> frozenset[int]:
        out: set[int] = set()
        for ids in self.splits.values():
            out |= ids
        return frozenset(out)


def load_store(path) -> EmbeddingStore:
    """Read and validate a FSEM file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreFormatError(f"{path}: file shorter than FSEM header")
    magic, version, n, dim, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n + 4 * n * dim
    if len(raw) != expected:
        raise StoreFormatError(
            f"{path}: truncated or oversized payload "
            f"(header implies {expected} bytes, file has {len(raw)})"
        )
    off = _HEADER.size
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    features = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off)
    features = features.reshape(n, dim).copy()
    return EmbeddingStore(
        dim=dim,
        features=features,
        labels=labels,
        nonneg=bool(flags & FLAG_NONNEG),
    )


def save_store(store: EmbeddingStore, path) -> None:
    """Write `store` in the bit-exact FSEM format; load_store inverts it."""
    if store.labels.size and store.labels.max() >= 2**32:
        raise StoreFormatError("class label does not fit in u32")
    flags = FLAG_NONNEG if store.nonneg else 0
    header = _HEADER.pack(MAGIC, VERSION, store.num_samples, store.dim, flags)
    body = (
        header
        + store.labels.astype("<u4").tobytes()
        + store.features.astype("<f4").tobytes()
    )
    Path(path).write_bytes(body)


def load_manifest(path) -> SplitManifest:
    """Parse a split-manifest JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "splits" not in doc:
        raise StoreFormatError(f"{path}: manifest must be an object with a 'splits' key")
    splits = {
        str(name): frozenset(int(c) for c in ids)
        for name, ids in doc["splits"].items()
    }
    names = {int(k): str(v) for k, v in doc.get("class_names", {}).items()}
    return SplitManifest(splits=splits, class_names=names)


def save_manifest(manifest: SplitManifest, path) -> None:
    doc = {
        "splits": {name: sorted(ids) for name, ids in manifest.splits.items()},
        "class_names": {str(k): v for k, v in manifest.class_names.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def validate_manifest(manifest: SplitManifest, store: EmbeddingStore) -> None:
    """Every class id the manifest references must exist in the store."""
    missing = sorted(manifest.classes() - set(store.class_index))
    if missing:
        raise StoreFormatError(
            f"manifest references classes absent from the store: {missing}"
        )


def restrict_to_split(
    store: EmbeddingStore, manifest: SplitManifest, split: str
) -> EmbeddingStore:
    """Store containing exactly the samples whose class is in `split`."""
    if split not in manifest.splits:
        raise StoreFormatError(f"unknown split {split!r}")
    validate_manifest(manifest, store)
    wanted = manifest.splits[split]
    mask = np.isin(store.labels, sorted(wanted))
    return EmbeddingStore(
        dim=store.dim,
        features=store.features[mask],
        labels=store.labels[mask],
        nonneg=store.nonneg,
    )
