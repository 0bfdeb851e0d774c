"""CLI: export-embeddings and decode-masks. Global weight flags come before
the subcommand so callers can template a fixed suffix, e.g.
`sambridge --checkpoint w.pth decode-masks --prompts P --image I --out O`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bridge import decode_masks, export_embeddings
from .model import MissingWeights, build_model


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sambridge",
                                description="frozen pretrained encoder/mask-decoder adapter")
    p.add_argument("--checkpoint", help="pretrained weights (sam_vit_b_01ec64.pth)")
    p.add_argument("--random-init", action="store_true",
                   help="seeded random weights for structural tests (no pretrained behaviour)")
    p.add_argument("--seed", type=int, default=0, help="seed for --random-init")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export-embeddings", help="write per-layer embedding archives")
    e.add_argument("--images", nargs="+", required=True, help="image files or a directory")
    e.add_argument("--out", required=True)

    d = sub.add_parser("decode-masks", help="box prompts -> TSR1 [N,H,W] masks")
    d.add_argument("--prompts", required=True, help="prompt JSON from the detector")
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--no-clip", action="store_true",
                   help="do not clip returned masks to their prompting boxes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = build_model(args.checkpoint, random_init=args.random_init, seed=args.seed)
        if args.command == "export-embeddings":
            paths = []
            for item in args.images:
                item = Path(item)
                if item.is_dir():
                    paths.extend(sorted(item.glob("*.png")) + sorted(item.glob("*.jpg")))
                else:
                    paths.append(item)
            if not paths:
                print("error: no images found", file=sys.stderr)
                return 2
            written = export_embeddings(model, paths, args.out)
            print(json.dumps({"archives": [str(w) for w in written]}, indent=1))
            return 0
        if args.command == "decode-masks":
            payload = json.loads(Path(args.prompts).read_text())
            masks = decode_masks(model, payload, args.image, args.out,
                                 clip_to_box=not args.no_clip)
            print(json.dumps({"out": args.out, "masks": int(masks.shape[0])}))
            return 0
        raise AssertionError(args.command)
    except MissingWeights as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
