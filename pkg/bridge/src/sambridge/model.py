"""Model assembly, checkpoint loading, and image preprocessing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .maskdec import MaskDecoder, PromptEncoder
from .vitb import ImageEncoderViT

VARIANT = "vit_b"
IMG_SIZE = 1024
PIXEL_MEAN = torch.tensor([123.675, 116.28, 103.53]).view(3, 1, 1)
PIXEL_STD = torch.tensor([58.395, 57.12, 57.375]).view(3, 1, 1)


class MissingWeights(RuntimeError):
    pass


class FrozenSam(nn.Module):
    """Image encoder + prompt encoder + mask decoder, inference-only."""

    def __init__(self):
        super().__init__()
        self.image_encoder = ImageEncoderViT()
        self.prompt_encoder = PromptEncoder()
        self.mask_decoder = MaskDecoder()

    def freeze(self) -> "FrozenSam":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def build_model(checkpoint: str | None, random_init: bool = False, seed: int = 0) -> FrozenSam:
    """Load pretrained weights, or build a seeded random-init model when
    explicitly requested (structural testing without weights)."""
    model = FrozenSam()
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise MissingWeights(
                f"checkpoint {path} not found; download the ViT-B weights "
                f"(sam_vit_b_01ec64.pth) and pass --checkpoint, or use --random-init "
                f"for structural tests"
            )
        state = torch.load(path, map_location="cpu", weights_only=True)
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected:
            raise MissingWeights(f"checkpoint has unexpected keys: {sorted(unexpected)[:8]} ...")
        if missing:
            raise MissingWeights(f"checkpoint misses keys: {sorted(missing)[:8]} ...")
    elif random_init:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
    else:
        raise MissingWeights(
            "no pretrained weights: pass --checkpoint /path/to/sam_vit_b_01ec64.pth "
            "(or --random-init for structural tests without real weights)"
        )
    return model.freeze()


def load_image_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def preprocess(rgb: np.ndarray) -> tuple[torch.Tensor, float, tuple[int, int]]:
    """Resize longest side to 1024, normalize, zero-pad to 1024x1024.
    Returns (tensor [1,3,1024,1024], scale, original (h, w))."""
    h, w = rgb.shape[:2]
    scale = IMG_SIZE / max(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    x = torch.from_numpy(rgb).permute(2, 0, 1).float()[None]
    x = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True)
    x = (x - PIXEL_MEAN) / PIXEL_STD
    x = F.pad(x, (0, IMG_SIZE - nw, 0, IMG_SIZE - nh))
    return x, scale, (h, w)
