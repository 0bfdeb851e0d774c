"""Command-line entry points: train / evaluate / detect / synth /
import-embeddings. Exit codes: 0 ok, 2 validation error, 3 runtime abort."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backend import NonFiniteGradient, ShapeError, TsrFormatError
from .data import DatasetError, SynthConfig, load_dataset, synth_generate
from .encoder import EncoderError, load_embeddings
from .train import (
    ConfigError,
    RunConfig,
    TrainingAbort,
    detect_to_files,
    evaluate,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

_VALIDATION_ERRORS = (ConfigError, DatasetError, EncoderError, ShapeError, TsrFormatError, ValueError)


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = json.loads(value)
    if args.config:
        return RunConfig.from_json(Path(args.config), overrides)
    return RunConfig.from_json("{}", overrides)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    summary = train(config, args.run_dir)
    report = {k: summary[k] for k in ("epochs", "steps", "final_epoch_train_total", "best_val_loss",
                                      "trainable_parameters", "wall_seconds")}
    print(json.dumps(report, indent=1))
    print(
        f"trainable parameters: {summary['trainable_parameters']:,} "
        f"(full-scale configuration: {summary['full_scale_configuration']:,}; "
        f"full-scale reference target: {summary['full_scale_reference']:,})"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pipeline = load_checkpoint(args.ckpt)
    if args.data:
        pipeline.config.data_root = args.data
    samples, manifest = load_dataset(pipeline.config.data_root)
    names = manifest.get("class_names")
    report = evaluate(pipeline, samples, mode=args.mode, out_dir=args.out, class_names=names)
    print(report.to_json())
    return EXIT_OK


def cmd_detect(args) -> int:
    pipeline = load_checkpoint(args.ckpt)
    from .data import Sample
    from .postprocess import InstanceSegmentation
    import numpy as np
    from PIL import Image

    path = Path(args.image)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    image = arr.transpose(2, 0, 1)
    size = pipeline.config.image_size
    if image.shape[1] != size or image.shape[2] != size:
        raise ConfigError(
            f"{path.name}: image is {image.shape[1]}x{image.shape[2]}, run expects {size}x{size} "
            "(no silent resize)"
        )
    empty = InstanceSegmentation(np.zeros(image.shape[1:], np.int32), np.zeros(0, int), np.zeros(0))
    sample = Sample(path.stem, image, empty)
    outputs = detect_to_files(pipeline, sample, args.out, emit_masks=args.emit_masks,
                              bridge_cmd=args.use_bridge)
    print(json.dumps(outputs, indent=1))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, count=args.n, image_size=args.size, num_classes=args.classes)
    stats = synth_generate(cfg, args.out)
    print(json.dumps(stats, indent=1))
    return EXIT_OK


def cmd_import_embeddings(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    archives = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not archives:
        raise ConfigError(f"{root}: no embedding archives found (expect <image_id>/manifest.json)")
    summary = []
    for a in archives:
        feats = load_embeddings(a)
        summary.append({
            "image_id": a.name,
            "layers": feats.config.layer_count,
            "shape": list(feats.features[0].shape),
        })
    print(json.dumps({"archives": summary, "count": len(summary)}, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxprompt",
                                description="anchor detector over frozen encoder features with box-prompt handoff")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the decoder+head on a dataset")
    t.add_argument("--config", help="RunConfig JSON file")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--set", action="append", metavar="KEY=JSON", help="override config keys")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset root (defaults to the checkpoint's)")
    e.add_argument("--mode", choices=["bbox", "pq", "full"], default="full")
    e.add_argument("--out", help="directory for report.json/confusion.csv/overlays")
    e.set_defaults(fn=cmd_evaluate)

    d = sub.add_parser("detect", help="detect on one image, emit box prompts")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--emit-masks", action="store_true")
    d.add_argument("--use-bridge", metavar="CMD",
                   help="external mask-decoder command consuming the prompt file")
    d.set_defaults(fn=cmd_detect)

    s = sub.add_parser("synth", help="generate the synthetic blob dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    i = sub.add_parser("import-embeddings", help="validate embedding archives")
    i.add_argument("--dir", required=True)
    i.set_defaults(fn=cmd_import_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingAbort, NonFiniteGradient, OSError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
