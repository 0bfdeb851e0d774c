"""Dataset ingestion (PNG images + TSR1 instance maps + JSON classes),
box/centroid derivation from instance masks, the synthetic blob generator,
augmentations, and stratified fold splitting."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backend import Tensor, read_tsr, write_tsr
from .postprocess import InstanceSegmentation


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# samples and mask-derived geometry


def derive_boxes_and_centroids(label_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tight boxes [x1,y1,x2,y2] (right/bottom exclusive) and centroids
    (row, col) as means of member pixel coordinates, per instance id 1..N."""
    label_map = np.asarray(label_map)
    n = int(label_map.max(initial=0))
    boxes = np.zeros((n, 4), dtype=np.float64)
    centroids = np.zeros((n, 2), dtype=np.float64)
    for i in range(1, n + 1):
        rows, cols = np.nonzero(label_map == i)
        if len(rows) == 0:
            raise DatasetError(f"instance id {i} has no pixels")
        boxes[i - 1] = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
        centroids[i - 1] = (rows.mean(), cols.mean())
    return boxes, centroids


@dataclass
class Sample:
    image_id: str
    image: np.ndarray                 # [3,H,W] float32 in [0,1]
    seg: InstanceSegmentation         # ground truth (scores all 1)
    boxes: np.ndarray = field(default=None)      # [G,4] derived, tight
    centroids: np.ndarray = field(default=None)  # [G,2] (row, col)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.image_id}: image must be [3,H,W], got {self.image.shape}")
        if self.image.shape[1:] != self.seg.label_map.shape:
            raise DatasetError(
                f"{self.image_id}: image {self.image.shape[1:]} and instance map "
                f"{self.seg.label_map.shape} sizes differ"
            )
        if self.boxes is None:
            self.boxes, self.centroids = derive_boxes_and_centroids(self.seg.label_map)

    @property
    def classes(self) -> np.ndarray:
        return self.seg.classes

    @property
    def size(self) -> int:
        return self.image.shape[1]

    def image_tensor(self) -> Tensor:
        return Tensor(self.image)


# ---------------------------------------------------------------------------
# on-disk layout: root/{manifest.json, images/*.png, instances/*.tsr, classes/*.json}


def save_dataset_manifest(root: Path, num_classes: int, class_names: list[str]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(
        json.dumps({"num_classes": num_classes, "class_names": class_names}, indent=1)
    )


def write_sample(root, sample: Sample) -> None:
    root = Path(root)
    for sub in ("images", "instances", "classes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    img8 = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img8.transpose(1, 2, 0)).save(root / "images" / f"{sample.image_id}.png")
    write_tsr(root / "instances" / f"{sample.image_id}.tsr",
              Tensor(sample.seg.label_map.astype(np.float32)))
    table = {str(i + 1): int(c) for i, c in enumerate(sample.seg.classes)}
    (root / "classes" / f"{sample.image_id}.json").write_text(json.dumps(table, indent=1))


def load_dataset(root) -> tuple[list[Sample], dict]:
    """Loads samples sorted by file name; validates sizes, id density and
    class range. Returns (samples, manifest)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    k = int(manifest["num_classes"])
    samples = []
    for img_path in sorted((root / "images").glob("*.png")):
        stem = img_path.stem
        inst_path = root / "instances" / f"{stem}.tsr"
        cls_path = root / "classes" / f"{stem}.json"
        if not inst_path.exists():
            raise DatasetError(f"{stem}: missing instance map {inst_path.name}")
        if not cls_path.exists():
            raise DatasetError(f"{stem}: missing class table {cls_path.name}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        image = arr.transpose(2, 0, 1)
        label_map = np.rint(read_tsr(inst_path).data).astype(np.int32)
        if label_map.shape != image.shape[1:]:
            raise DatasetError(
                f"{stem}: image {img_path.name} is {image.shape[1:]} but instance map "
                f"{inst_path.name} is {label_map.shape}"
            )
        table = json.loads(cls_path.read_text())
        n = int(label_map.max(initial=0))
        classes = np.zeros(n, dtype=np.int64)
        for i in range(1, n + 1):
            if str(i) not in table:
                raise DatasetError(f"{stem}: instance {i} missing from class table")
            classes[i - 1] = int(table[str(i)])
        if n and (classes.min() < 1 or classes.max() > k):
            bad = int(classes[(classes < 1) | (classes > k)][0])
            raise DatasetError(f"{stem}: unknown class id {bad} (num_classes={k})")
        seg = InstanceSegmentation(label_map, classes, np.ones(n))
        samples.append(Sample(stem, image, seg))
    return samples, manifest


# ---------------------------------------------------------------------------
# synthetic blob dataset


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count: int = 100
    image_size: int = 128
    num_classes: int = 2
    blobs_min: int = 3
    blobs_max: int = 8
    radius_min: float = 5.0
    radius_max: float = 14.0
    noise_sigma: float = 0.03

    def __post_init__(self):
        if self.num_classes < 1:
            raise DatasetError("need at least one class")
        if self.radius_max * 2 >= self.image_size / 2:
            raise DatasetError("blobs too large for the image")


_BACKGROUND = np.array([0.84, 0.78, 0.86], dtype=np.float32)
_PALETTE = [
    (0.45, 0.16, 0.22),  # dark red
    (0.18, 0.28, 0.62),  # blue
    (0.16, 0.52, 0.28),  # green
    (0.62, 0.45, 0.12),  # ochre
    (0.42, 0.18, 0.55),  # purple
    (0.10, 0.50, 0.52),  # teal
]


def class_color(c: int) -> np.ndarray:
    return np.array(_PALETTE[(c - 1) % len(_PALETTE)], dtype=np.float32)


def synth_sample(cfg: SynthConfig, index: int) -> tuple[Sample, int]:
    """One deterministic synthetic image; returns (sample, skipped blobs)."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    s = cfg.image_size
    image = np.empty((3, s, s), dtype=np.float32)
    image[:] = _BACKGROUND[:, None, None]
    image += rng.normal(0, cfg.noise_sigma, (3, s, s)).astype(np.float32)
    label = np.zeros((s, s), dtype=np.int32)
    yy, xx = np.mgrid[0:s, 0:s]
    cy_pix = yy + 0.5
    cx_pix = xx + 0.5

    n_blobs = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
    classes = []
    skipped = 0
    for _ in range(n_blobs):
        placed = False
        for _attempt in range(30):
            a = rng.uniform(cfg.radius_min, cfg.radius_max)
            b = rng.uniform(cfg.radius_min, cfg.radius_max)
            cx = rng.uniform(a + 1, s - a - 1)
            cy = rng.uniform(b + 1, s - b - 1)
            mask = ((cx_pix - cx) / a) ** 2 + ((cy_pix - cy) / b) ** 2 <= 1.0
            if not mask.any() or label[mask].any():
                continue
            cls = int(rng.integers(1, cfg.num_classes + 1))
            color = class_color(cls)
            jitter = rng.normal(0, 0.02, 3).astype(np.float32)
            image[:, mask] = (color + jitter)[:, None] + rng.normal(
                0, cfg.noise_sigma / 2, (3, int(mask.sum()))
            ).astype(np.float32)
            label[mask] = len(classes) + 1
            classes.append(cls)
            placed = True
            break
        if not placed:
            skipped += 1
    image = np.clip(image, 0.0, 1.0)
    seg = InstanceSegmentation(label, np.array(classes, np.int64), np.ones(len(classes)))
    return Sample(f"synth_{index:05d}", image, seg), skipped


def synth_generate(cfg: SynthConfig, root) -> dict:
    """Writes the dataset layout to disk; byte-identical per (cfg, root)."""
    root = Path(root)
    class_names = [f"class{c}" for c in range(1, cfg.num_classes + 1)]
    save_dataset_manifest(root, cfg.num_classes, class_names)
    total_skipped = 0
    total_instances = 0
    for i in range(cfg.count):
        sample, skipped = synth_sample(cfg, i)
        write_sample(root, sample)
        total_skipped += skipped
        total_instances += sample.seg.num_instances
    stats = {
        "count": cfg.count,
        "instances": total_instances,
        "skipped_blobs": total_skipped,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "num_classes": cfg.num_classes,
    }
    (root / "synth_stats.json").write_text(json.dumps(stats, indent=1))
    return stats


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    flip: bool = True
    noise_sigma: float = 0.05
    jitter: float = 0.1  # brightness/contrast range, +-10%


def rot90cw(arr: np.ndarray, k: int) -> np.ndarray:
    """Clockwise quarter turns on the trailing two axes: (r,c) -> (c, H-1-r)."""
    return np.rot90(arr, k=-k, axes=(-2, -1))


def transform_points(points_rc: np.ndarray, size: int, k: int, hflip: bool, vflip: bool) -> np.ndarray:
    """Apply the same geometry to (row, col) points."""
    pts = np.asarray(points_rc, np.float64).reshape(-1, 2).copy()
    for _ in range(k % 4):
        r = pts[:, 0].copy()
        c = pts[:, 1].copy()
        pts[:, 0] = c
        pts[:, 1] = size - 1 - r
    if hflip:
        pts[:, 1] = size - 1 - pts[:, 1]
    if vflip:
        pts[:, 0] = size - 1 - pts[:, 0]
    return pts


def transform_boxes(boxes: np.ndarray, size: int, k: int, hflip: bool, vflip: bool) -> np.ndarray:
    """Same geometry on [x1,y1,x2,y2] boxes with exclusive right/bottom."""
    b = np.asarray(boxes, np.float64).reshape(-1, 4).copy()
    for _ in range(k % 4):
        x1, y1, x2, y2 = b[:, 0].copy(), b[:, 1].copy(), b[:, 2].copy(), b[:, 3].copy()
        # pixel (r,c) -> (c, S-1-r): new x in [S-y2, S-y1), new y in [x1, x2)
        b[:, 0] = size - y2
        b[:, 1] = x1
        b[:, 2] = size - y1
        b[:, 3] = x2
    if hflip:
        x1 = b[:, 0].copy()
        b[:, 0] = size - b[:, 2]
        b[:, 2] = size - x1
    if vflip:
        y1 = b[:, 1].copy()
        b[:, 1] = size - b[:, 3]
        b[:, 3] = size - y1
    return b


def augment(sample: Sample, seed: int, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Seeded rotation/flip/noise/jitter; geometry-only transforms touch the
    ground truth, noise and jitter touch the image alone."""
    if cfg.rotate and sample.image.shape[1] != sample.image.shape[2]:
        raise DatasetError(f"{sample.image_id}: rotation needs a square image, got {sample.image.shape[1:]}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 4)) if cfg.rotate else 0
    hflip = bool(rng.integers(0, 2)) if cfg.flip else False
    vflip = bool(rng.integers(0, 2)) if cfg.flip else False

    image = sample.image
    label = sample.seg.label_map
    if k:
        image = rot90cw(image, k)
        label = rot90cw(label, k)
    if hflip:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    if vflip:
        image = image[:, ::-1, :]
        label = label[::-1, :]
    image = np.ascontiguousarray(image)
    label = np.ascontiguousarray(label)

    if cfg.jitter > 0:
        brightness = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
        contrast = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
        mean = image.mean()
        image = (image - mean) * contrast + mean * brightness
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    seg = InstanceSegmentation(label, sample.seg.classes.copy(), sample.seg.scores.copy())
    return Sample(sample.image_id, image, seg)


# ---------------------------------------------------------------------------
# fold splitting


@dataclass
class FoldSplit:
    test: list[int]
    folds: list[list[int]]

    def all_train(self) -> list[int]:
        return [i for fold in self.folds for i in fold]


def split_folds(samples: list[Sample], folds: int = 3, test_fraction: float = 0.2, seed: int = 0) -> FoldSplit:
    """Disjoint stratified test split plus `folds` training folds; samples
    containing the rarest class are spread so per-fold counts differ by at
    most one."""
    if not samples:
        raise DatasetError("cannot split an empty dataset")
    counts: dict[int, int] = {}
    for s in samples:
        for c in s.classes:
            counts[int(c)] = counts.get(int(c), 0) + 1
    if counts:
        rarest = min(sorted(counts), key=lambda c: counts[c])
    else:
        rarest = None

    has_rare = [i for i, s in enumerate(samples) if rarest is not None and rarest in s.classes]
    rest = [i for i in range(len(samples)) if i not in set(has_rare)]
    if rarest is not None and len(has_rare) < folds:
        warnings.warn(
            f"rarest class {rarest} appears in only {len(has_rare)} samples; "
            f"stratification over {folds} folds is best-effort"
        )

    rng = np.random.default_rng(seed)
    rng.shuffle(has_rare)
    rng.shuffle(rest)

    n_test = round(test_fraction * len(samples))
    n_test_rare = min(len(has_rare), round(test_fraction * len(has_rare)))
    test = has_rare[:n_test_rare] + rest[: n_test - n_test_rare]
    remaining_rare = has_rare[n_test_rare:]
    remaining_rest = rest[n_test - n_test_rare:]

    fold_lists: list[list[int]] = [[] for _ in range(folds)]
    for j, idx in enumerate(remaining_rare):
        fold_lists[j % folds].append(idx)
    for idx in remaining_rest:
        smallest = min(range(folds), key=lambda f: (len(fold_lists[f]), f))
        fold_lists[smallest].append(idx)
    return FoldSplit(sorted(test), [sorted(f) for f in fold_lists])
