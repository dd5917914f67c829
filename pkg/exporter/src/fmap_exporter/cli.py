"""Command-line entry point: ``fmap-export export --image ... --out ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .clipvit import ExporterError
from .export import export_image, manifest_path_for


def parse_blocks(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ExporterError(f"block list must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmap-export",
        description="Run a vision transformer on an image and write per-block "
        "patch features as an FMAP1 container",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export block features for one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--blocks", type=str, default="3,6,9,12,15,18,21,24",
                   help="comma-separated block indices, evenly spaced, ending "
                        "at the encoder depth")
    p.add_argument("--out", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--weights", type=Path, default=None,
                       help="local checkpoint directory with pretrained weights")
    group.add_argument("--random-init", action="store_true",
                       help="build the architecture with seeded random weights "
                            "(no checkpoint required)")
    p.add_argument("--seed", type=int, default=0, help="seed for --random-init")
    p.add_argument("--penultimate", action="store_true",
                   help="tap the deepest requested block one layer lower, the "
                        "common single-tap convention for the final block")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = export_image(
            image=args.image,
            block_indices=parse_blocks(args.blocks),
            out=args.out,
            weights=args.weights,
            random_init_seed=args.seed if args.random_init else None,
            penultimate_final=args.penultimate,
        )
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(
        f"wrote {manifest.output} ({len(manifest.block_indices)} maps, "
        f"sha256 {manifest.payload_sha256[:12]}...) and {manifest_path_for(args.out)}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
