"""CLI: run a checkpoint over a dataset tree and write an FSEM store."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fsml-export",
        description="Extract feature-layer embeddings from a TorchScript "
        "backbone over an image tree into an FSEM store + split manifest.",
    )
    p.add_argument("--checkpoint", type=Path, required=True,
                   help="TorchScript module: float (B,3,H,W) -> features (B,dim)")
    p.add_argument("--dataset-root", type=Path, required=True,
                   help="directory with one subdirectory of images per class")
    p.add_argument("--split-spec", type=Path,
                   help="JSON mapping split names to class-name lists "
                   "(default: every class in 'test')")
    p.add_argument("--out", type=Path, required=True, help="output FSEM path")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--device", default="cpu")
    p.add_argument("--image-size", type=int, default=84)
    p.add_argument("--require-nonneg", action="store_true",
                   help="abort if any extracted feature is negative")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        checkpoint=args.checkpoint,
        dataset_root=args.dataset_root,
        out_path=args.out,
        split_spec=args.split_spec,
        batch_size=args.batch_size,
        device=args.device,
        image_size=args.image_size,
        require_nonneg=args.require_nonneg,
    )
    try:
        result = export(job)
    except (ExportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.num_samples} samples x dim {result.dim} "
        f"(nonneg={result.nonneg}) -> {result.store_path}",
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
