"""The two bridge operations: per-layer embedding export and box-prompted
mask decoding, both speaking the detection pipeline's file formats."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from .model import IMG_SIZE, VARIANT, FrozenSam, load_image_rgb, preprocess
from .tsr import write_tsr

FEATURE_TAP = "post_block"  # per-layer taps are taken after each full block


def export_embeddings(model: FrozenSam, image_paths: list, out_dir) -> list[Path]:
    """One archive per image: manifest.json + layer_XX.tsr, loadable by the
    detection pipeline's embedding importer."""
    out_dir = Path(out_dir)
    written = []
    enc = model.image_encoder
    for path in image_paths:
        path = Path(path)
        rgb = load_image_rgb(path)
        x, _, _ = preprocess(rgb)
        taps, _ = enc.forward_with_taps(x)
        archive = out_dir / path.stem
        archive.mkdir(parents=True, exist_ok=True)
        manifest = {
            "layer_count": enc.depth,
            "global_attention_indices": list(enc.global_attn_indexes),
            "patch_size": enc.patch_size,
            "image_size": IMG_SIZE,
            "embed_dim": enc.embed_dim,
            "model_variant": VARIANT,
            "feature_tap": FEATURE_TAP,
            "exported_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        (archive / "manifest.json").write_text(json.dumps(manifest, indent=1))
        for i, tap in enumerate(taps):
            write_tsr(archive / f"layer_{i:02d}.tsr", tap[0].numpy().astype(np.float32))
        written.append(archive)
    return written


def decode_masks(
    model: FrozenSam,
    prompt_payload: dict,
    image_path,
    out_path,
    clip_to_box: bool = True,
    batch: int = 16,
) -> np.ndarray:
    """PromptFile boxes -> one binary mask per prompt, order preserved,
    written as a TSR1 [N,H,W] tensor of {0,1}."""
    rgb = load_image_rgb(image_path)
    x, scale, (h, w) = preprocess(rgb)
    boxes = np.array(
        [[b["x1"], b["y1"], b["x2"], b["y2"]] for b in prompt_payload["boxes"]],
        dtype=np.float64,
    ).reshape(-1, 4)

    clipped = boxes.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0, w)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0, h)
    if len(boxes) and not np.allclose(clipped, boxes):
        print(f"warning: {int((clipped != boxes).any(axis=1).sum())} boxes clipped to the image")

    n = len(clipped)
    masks = np.zeros((n, h, w), dtype=np.float32)
    if n:
        _, neck = model.image_encoder.forward_with_taps(x)
        dense_pe = model.prompt_encoder.get_dense_pe()
        scaled = torch.from_numpy(clipped * scale).float()
        for lo in range(0, n, batch):
            chunk = scaled[lo : lo + batch]
            sparse = model.prompt_encoder.embed_boxes(chunk)
            dense = model.prompt_encoder.dense_no_mask(len(chunk))
            low_res, _ = model.mask_decoder.predict(neck, dense_pe, sparse, dense)
            best = low_res[:, 0:1]  # single-mask output token
            up = torch.nn.functional.interpolate(best, (IMG_SIZE, IMG_SIZE), mode="bilinear",
                                                 align_corners=False)
            nh, nw = int(round(h * scale)), int(round(w * scale))
            up = up[:, :, :nh, :nw]
            up = torch.nn.functional.interpolate(up, (h, w), mode="bilinear", align_corners=False)
            masks[lo : lo + batch] = (up[:, 0] > 0.0).numpy().astype(np.float32)

    if clip_to_box:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = yy + 0.5, xx + 0.5
        for i, (x1, y1, x2, y2) in enumerate(clipped):
            inside = (cx >= x1) & (cx < x2) & (cy >= y1) & (cy < y2)
            masks[i] *= inside

    write_tsr(out_path, masks)
    return masks
