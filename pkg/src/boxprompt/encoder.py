"""Per-layer encoder features: a deterministic frozen toy encoder, import of
embedding archives exported from a real pretrained encoder, and the
partition of layers into the four global-attention blocks."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import Conv2d, Parameter, Tensor, read_tsr, relu, tensor_from_bytes, write_tsr


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layer_count: int = 12
    global_attention_indices: tuple[int, ...] = (2, 5, 8, 11)
    patch_size: int = 16
    embed_dim: int = 32
    resolution: int = 256

    def __post_init__(self):
        g = tuple(self.global_attention_indices)
        if len(g) != 4:
            raise EncoderError(f"need exactly 4 global-attention indices, got {g}")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise EncoderError(f"global-attention indices must be strictly increasing: {g}")
        if g[-1] >= self.layer_count:
            raise EncoderError(f"global-attention index {g[-1]} out of range for {self.layer_count} layers")
        if self.resolution % self.patch_size:
            raise EncoderError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")

    @property
    def grid_size(self) -> int:
        return self.resolution // self.patch_size


@dataclass
class LayerFeatures:
    """One feature map per encoder layer, each [D, S, S]."""

    features: list[Tensor]
    config: EncoderConfig

    def __post_init__(self):
        if len(self.features) != self.config.layer_count:
            raise EncoderError(f"expected {self.config.layer_count} layer maps, got {len(self.features)}")
        shapes = {t.shape for t in self.features}
        if len(shapes) != 1:
            raise EncoderError(f"layer maps disagree on shape: {sorted(shapes)}")
        (shape,) = shapes
        s = self.config.grid_size
        if len(shape) != 3 or shape[1:] != (s, s):
            raise EncoderError(f"layer maps must be [D,{s},{s}], got {shape}")

    @property
    def embed_dim(self) -> int:
        return self.features[0].shape[0]


def block_layer_indices(config: EncoderConfig) -> tuple[tuple[int, int, int], ...]:
    """Four runs of three consecutive layers, each ending at a
    global-attention index; the runs must exactly partition the layers."""
    g = config.global_attention_indices
    if config.layer_count != 3 * len(g):
        raise EncoderError(f"{config.layer_count} layers cannot split into {len(g)} runs of 3")
    blocks = tuple((i - 2, i - 1, i) for i in g)
    flat = [i for b in blocks for i in b]
    if flat != list(range(config.layer_count)):
        raise EncoderError(f"global-attention indices {g} do not induce a partition into runs of 3")
    return blocks


def partition_blocks(features: LayerFeatures) -> list[list[Tensor]]:
    idx = block_layer_indices(features.config)
    return [[features.features[i] for i in run] for run in idx]


class ToyEncoder:
    """Deterministic frozen feature extractor: seeded patch embedding plus a
    seeded 3x3 mixing conv per layer, never trained."""

    def __init__(self, config: EncoderConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        p, d = config.patch_size, config.embed_dim
        self.patchify = Conv2d(3, d, p, stride=p, padding=0, rng=rng, dtype=dtype,
                               trainable=False, name="encoder.patchify")
        self.mixers = [
            Conv2d(d, d, 3, padding=1, rng=rng, dtype=dtype, trainable=False, name=f"encoder.layer{i:02d}")
            for i in range(config.layer_count)
        ]

    def parameters(self) -> list[Parameter]:
        params = list(self.patchify.parameters())
        for m in self.mixers:
            params += m.parameters()
        return params

    def forward_batch(self, images: Tensor) -> list[Tensor]:
        """images: [N,3,H,W] in [0,1] -> list of layer maps [N,D,S,S]."""
        n, c, h, w = images.shape
        r = self.config.resolution
        if c != 3 or h != r or w != r:
            raise EncoderError(f"expected [N,3,{r},{r}] images, got {images.shape}")
        x = self.patchify(images)
        outs = []
        for mixer in self.mixers:
            x = relu(mixer(x))
            outs.append(x)
        return outs

    def forward(self, image: Tensor) -> LayerFeatures:
        if len(image.shape) != 3:
            raise EncoderError(f"expected [3,H,W] image, got {image.shape}")
        batched = Tensor._wrap(image.data[None])
        layers = self.forward_batch(batched)
        return LayerFeatures([Tensor._wrap(t.data[0]) for t in layers], self.config)


MANIFEST_NAME = "manifest.json"


def _layer_name(i: int) -> str:
    return f"layer_{i:02d}.tsr"


def save_embeddings(features: LayerFeatures, path) -> None:
    """Write an embedding archive: manifest.json + one TSR1 file per layer."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = features.config
    manifest = {
        "layer_count": cfg.layer_count,
        "global_attention_indices": list(cfg.global_attention_indices),
        "patch_size": cfg.patch_size,
        "image_size": cfg.resolution,
        "embed_dim": features.embed_dim,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    for i, t in enumerate(features.features):
        write_tsr(root / _layer_name(i), t)


def load_embeddings(path) -> LayerFeatures:
    """Load an embedding archive from a directory or a .zip of the same layout."""
    root = Path(path)
    if root.is_file() and zipfile.is_zipfile(root):
        with zipfile.ZipFile(root) as zf:
            names = set(zf.namelist())
            if MANIFEST_NAME not in names:
                raise EncoderError(f"{root}: archive has no {MANIFEST_NAME}")
            manifest = json.loads(zf.read(MANIFEST_NAME))
            reader = lambda name: tensor_from_bytes(zf.read(name))
            exists = lambda name: name in names
            return _load_from(manifest, reader, exists, str(root))
    if not (root / MANIFEST_NAME).exists():
        raise EncoderError(f"{root}: no {MANIFEST_NAME} found")
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    reader = lambda name: read_tsr(root / name)
    exists = lambda name: (root / name).exists()
    return _load_from(manifest, reader, exists, str(root))


def _load_from(manifest: dict, reader, exists, where: str) -> LayerFeatures:
    try:
        config = EncoderConfig(
            layer_count=int(manifest["layer_count"]),
            global_attention_indices=tuple(manifest["global_attention_indices"]),
            patch_size=int(manifest["patch_size"]),
            embed_dim=int(manifest["embed_dim"]),
            resolution=int(manifest["image_size"]),
        )
    except KeyError as e:
        raise EncoderError(f"{where}: manifest missing key {e}") from None

    tensors = []
    s = config.grid_size
    for i in range(config.layer_count):
        name = _layer_name(i)
        if not exists(name):
            raise EncoderError(f"{where}: manifest promises {config.layer_count} layers but {name} is missing")
        t = reader(name)
        expected = (config.embed_dim, s, s)
        if t.shape != expected:
            raise EncoderError(f"{where}/{name}: shape {t.shape} does not match manifest {expected}")
        tensors.append(t)
    return LayerFeatures(tensors, config)
