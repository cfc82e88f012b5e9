"""Run a feature-extractor checkpoint over an image tree, emit FSEM.

The checkpoint is a TorchScript module mapping a float image batch
(B, 3, H, W) to its feature-layer output (B, dim). Inference only: no
training, no fine-tuning, no augmentation. Dataset layout is one
subdirectory per class under the root, images inside.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .fsem import write_fsem

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    checkpoint: Path
    dataset_root: Path
    out_path: Path
    split_spec: Path | None = None
    batch_size: int = 64
    device: str = "cpu"
    image_size: int = 84
    require_nonneg: bool = False
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD


@dataclass
class ExportResult:
    store_path: Path
    manifest_path: Path
    num_samples: int
    dim: int
    nonneg: bool
    class_to_id: dict[str, int] = field(repr=False, default_factory=dict)


def scan_dataset(root) -> dict[str, list[Path]]:
    """Class name -> sorted image paths; deterministic order."""
    root = Path(root)
    if not root.is_dir():
        raise ExportError(f"dataset root {root} is not a directory")
    classes = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        imgs = sorted(
            p for p in sub.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if imgs:
            classes[sub.name] = imgs
    if not classes:
        raise ExportError(f"no class directories with images under {root}")
    return classes


def load_split_spec(path, class_names: list[str]) -> dict[str, list[str]]:
    doc = json.loads(Path(path).read_text())
    known = set(class_names)
    seen: set[str] = set()
    for split, names in doc.items():
        if split not in ("train", "val", "test"):
            raise ExportError(f"split spec has unknown split {split!r}")
        for name in names:
            if name not in known:
                raise ExportError(f"split spec references unknown class {name!r}")
            if name in seen:
                raise ExportError(f"class {name!r} assigned to two splits")
            seen.add(name)
    return {k: list(v) for k, v in doc.items()}


def _load_batch(paths, size, mean, std) -> torch.Tensor:
    arrs = []
    for p in paths:
        with Image.open(p) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arrs.append(np.asarray(im, dtype=np.float32) / 255.0)
    batch = np.stack(arrs).transpose(0, 3, 1, 2)  # NHWC -> NCHW
    batch -= np.asarray(mean, dtype=np.float32)[None, :, None, None]
    batch /= np.asarray(std, dtype=np.float32)[None, :, None, None]
    return torch.from_numpy(batch)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_model(path, device):
    # TorchScript first (the common single-file checkpoint), then the newer
    # torch.export archive format
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        try:
            return torch.jit.load(str(path), map_location=device)
        except Exception as jit_exc:
            try:
                return torch.export.load(str(path)).module()
            except Exception:
                raise ExportError(
                    f"cannot load checkpoint {path} as TorchScript or "
                    f"torch.export archive: {jit_exc}"
                ) from jit_exc


def export(job: ExportJob) -> ExportResult:
    """Extract features for every image and write the FSEM store + manifest."""
    model = _load_model(job.checkpoint, job.device)
    model.eval()

    classes = scan_dataset(job.dataset_root)
    class_names = sorted(classes)
    class_to_id = {name: i for i, name in enumerate(class_names)}

    feats_parts: list[np.ndarray] = []
    labels_parts: list[np.ndarray] = []
    with torch.no_grad():
        for name in class_names:
            paths = classes[name]
            for lo in range(0, len(paths), job.batch_size):
                batch = _load_batch(
                    paths[lo : lo + job.batch_size], job.image_size, job.mean, job.std
                ).to(job.device)
                out = model(batch)
                if out.ndim > 2:
                    out = torch.flatten(out, start_dim=1)
                if out.ndim != 2 or out.shape[0] != batch.shape[0]:
                    raise ExportError(
                        f"checkpoint emitted shape {tuple(out.shape)}; expected (batch, dim)"
                    )
                feats_parts.append(out.cpu().numpy().astype(np.float32))
                labels_parts.append(
                    np.full(out.shape[0], class_to_id[name], dtype=np.int64)
                )

    features = np.concatenate(feats_parts)
    labels = np.concatenate(labels_parts)
    dims = {p.shape[1] for p in feats_parts}
    if len(dims) != 1:
        raise ExportError(f"inconsistent feature widths across batches: {sorted(dims)}")

    nonneg = bool((features >= 0).all())
    if job.require_nonneg and not nonneg:
        bad = int(np.nonzero((features < 0).any(axis=1))[0][0])
        raise ExportError(
            f"nonnegative output required but sample {bad} has negative features; "
            "is the feature layer really post-ReLU?"
        )

    write_fsem(job.out_path, features, labels, nonneg)

    if job.split_spec is not None:
        split_names = load_split_spec(job.split_spec, class_names)
    else:
        split_names = {"test": class_names}
    manifest = {
        "splits": {
            split: sorted(class_to_id[n] for n in names)
            for split, names in split_names.items()
        },
        "class_names": {str(i): name for name, i in class_to_id.items()},
        "export_meta": {
            "checkpoint_sha256": _sha256(job.checkpoint),
            "image_size": job.image_size,
            "mean": list(job.mean),
            "std": list(job.std),
            "dim": int(features.shape[1]),
        },
    }
    manifest_path = Path(job.out_path).with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    return ExportResult(
        store_path=Path(job.out_path),
        manifest_path=manifest_path,
        num_samples=features.shape[0],
        dim=int(features.shape[1]),
        nonneg=nonneg,
        class_to_id=class_to_id,
    )
