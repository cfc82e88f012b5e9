"""Standalone FSEM writer.

Deliberately independent of the evaluation engine: the binary format is the
contract between the two packages, so this side serializes it from scratch.

Layout (little-endian): magic "FSEM", u32 version=1, u32 num_samples,
u32 dim, u32 flags (bit 0 = all features nonnegative), num_samples x u32
labels, num_samples x dim x f32 features, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSEM"
VERSION = 1
FLAG_NONNEG = 0x1
_HEADER = struct.Struct("<4sIIII")


def write_fsem(path, features: np.ndarray, labels: np.ndarray, nonneg: bool) -> None:
    features = np.ascontiguousarray(features, dtype=np.float32)
    labels = np.ascontiguousarray(labels)
    if features.ndim != 2:
        raise ValueError(f"features must be (n, dim), got {features.shape}")
    n, dim = features.shape
    if dim < 1:
        raise ValueError("feature dimensionality must be positive")
    if labels.shape != (n,):
        raise ValueError("one label per feature row required")
    if not np.isfinite(features).all():
        raise ValueError("non-finite feature value")
    if labels.size and (labels.min() < 0 or labels.max() >= 2**32):
        raise ValueError("labels must fit in u32")
    if nonneg and (features < 0).any():
        raise ValueError("nonneg flag requested but features contain negatives")
    flags = FLAG_NONNEG if nonneg else 0
    payload = (
        _HEADER.pack(MAGIC, VERSION, n, dim, flags)
        + labels.astype("<u4").tobytes()
        + features.astype("<f4").tobytes()
    )
    Path(path).write_bytes(payload)
