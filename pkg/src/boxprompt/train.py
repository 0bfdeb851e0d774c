"""Run configuration, the training loop with reduce-on-plateau scheduling,
checkpointing, and the end-to-end evaluate/detect pipelines."""

from __future__ import annotations

import csv
import json
import shlex
import subprocess
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .backend import Adam, Tape, Tensor, read_tsr, write_tsr
from .data import AugmentConfig, Sample, augment, load_dataset
from .decoder import DecoderConfig, PyramidDecoder, count_parameters, decoder_parameter_count
from .encoder import EncoderConfig, ToyEncoder, block_layer_indices, load_embeddings
from .head import (
    AnchorConfig,
    DetectionHead,
    box_loss,
    focal_loss,
    generate_anchors,
    match_anchors,
)
from .metrics import (
    MetricsReport,
    average_precision,
    average_precision_per_class,
    centroid_prf,
    dice,
    panoptic_quality,
    prf_dict,
)
from .postprocess import (
    Detection,
    InstanceSegmentation,
    decode_and_filter,
    emit_prompts,
    merge_masks,
    nms,
    stub_mask_decoder,
)

FULL_SCALE_REFERENCE_PARAMS = 43_910_000  # full-scale comparator, reported not asserted


class ConfigError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    pass


@dataclass
class RunConfig:
    data_root: str = ""
    # encoder source: "toy" runs the seeded frozen encoder; "import" reads
    # per-image embedding archives from embeddings_dir
    encoder_source: str = "toy"
    embeddings_dir: str = ""
    encoder_seed: int = 17
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 32
    layer_count: int = 12
    global_attention_indices: tuple[int, ...] = (2, 5, 8, 11)
    channels: int = 64
    skip_mode: str = "chain"
    combine: str = "concat"
    num_classes: int = 0              # 0: take from dataset manifest
    epochs: int = 50
    lr: float = 3e-4
    lr_floor: float = 3e-7
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    batch_size: int = 8
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = True
    aug_noise_sigma: float = 0.05
    aug_jitter: float = 0.1
    anchor_base_multiplier: float = 4.0
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 1000
    stub_mode: str = "ellipse"
    mpq_average: str = "dataset"
    centroid_radius: float = 12.0

    def __post_init__(self):
        if self.lr_floor > self.lr:
            raise ConfigError(f"lr floor {self.lr_floor} exceeds initial lr {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.encoder_source not in ("toy", "import"):
            raise ConfigError(f"unknown encoder source {self.encoder_source!r}")
        if self.encoder_source == "import" and self.augment:
            raise ConfigError("augmentation requires re-encoding; disable it for imported embeddings")

    @classmethod
    def from_json(cls, path_or_text, overrides: dict | None = None) -> "RunConfig":
        p = Path(str(path_or_text))
        text = p.read_text() if p.exists() else str(path_or_text)
        payload = json.loads(text)
        payload.update(overrides or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "global_attention_indices" in payload:
            payload["global_attention_indices"] = tuple(payload["global_attention_indices"])
        return cls(**payload)

    def to_json(self, path=None) -> str:
        payload = asdict(self)
        payload["global_attention_indices"] = list(self.global_attention_indices)
        text = json.dumps(payload, indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layer_count=self.layer_count,
            global_attention_indices=tuple(self.global_attention_indices),
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            resolution=self.image_size,
        )

    def decoder_config(self) -> DecoderConfig:
        enc = self.encoder_config()
        return DecoderConfig(
            channels=self.channels,
            in_channels=self.embed_dim,
            base_size=enc.grid_size,
            combine=self.combine,
            skip_mode=self.skip_mode,
        )

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(base_multiplier=self.anchor_base_multiplier)


class ReduceLROnPlateau:
    """Multiplies lr by `factor` after `patience` consecutive non-improving
    epochs; changes happen only at epoch boundaries and never go below the
    floor."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5, floor: float = 3e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = np.inf
        self.bad_epochs = 0
        self.trace: list[float] = []

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.floor, self.lr * self.factor)
                self.bad_epochs = 0
        self.trace.append(self.lr)
        return self.lr


# ---------------------------------------------------------------------------
# pipeline


class Pipeline:
    """Frozen feature source + trainable decoder/head + anchor layout."""

    def __init__(self, config: RunConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        self.encoder_cfg = config.encoder_config()
        self.decoder_cfg = config.decoder_config()
        ss = np.random.SeedSequence(config.seed)
        dec_rng, head_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
        self.encoder = ToyEncoder(self.encoder_cfg, config.encoder_seed) if config.encoder_source == "toy" else None
        self.decoder = PyramidDecoder(self.decoder_cfg, dec_rng)
        self.head = DetectionHead(config.channels, num_classes, config.anchor_config(), head_rng)
        self.block_indices = block_layer_indices(self.encoder_cfg)
        self.anchor_levels = generate_anchors(
            self.decoder_cfg.level_sizes, config.image_size, config.anchor_config()
        )
        self.anchors = np.concatenate(self.anchor_levels)

    # -- features

    def features_from_images(self, images: np.ndarray) -> list[Tensor]:
        """images [N,3,H,W] float32 -> 12 layer maps [N,D,S,S]."""
        if self.encoder is None:
            raise ConfigError("pipeline has no toy encoder; use features_from_archives")
        return self.encoder.forward_batch(Tensor._wrap(np.ascontiguousarray(images)))

    def features_from_archives(self, image_ids: list[str]) -> list[Tensor]:
        root = Path(self.config.embeddings_dir)
        per_image = []
        for image_id in image_ids:
            feats = load_embeddings(root / image_id)
            if feats.config != self.encoder_cfg:
                raise ConfigError(
                    f"{image_id}: embedding archive config {feats.config} does not match run config"
                )
            per_image.append([t.data for t in feats.features])
        layers = []
        for l in range(self.encoder_cfg.layer_count):
            layers.append(Tensor._wrap(np.stack([f[l] for f in per_image])))
        return layers

    def blocks_from_layers(self, layers: list[Tensor]) -> list[list[Tensor]]:
        return [[layers[i] for i in run] for run in self.block_indices]

    def forward_features(self, layers: list[Tensor], train: bool) -> tuple[Tensor, Tensor]:
        pyramid = self.decoder.forward(self.blocks_from_layers(layers), train=train)
        return self.head.forward(pyramid)

    # -- parameters

    def trainable_parameters(self):
        return self.decoder.parameters() + self.head.parameters()

    def frozen_parameters(self):
        return self.encoder.parameters() if self.encoder is not None else []

    def named_buffers(self):
        return self.decoder.buffers()

    def parameter_report(self) -> dict:
        full_cfg = DecoderConfig(channels=256, in_channels=768, base_size=64)
        # head at full scale: width 256, 5 classes, 9 anchors per cell
        a = self.head.anchor_cfg.anchors_per_cell
        full_head = 2 * 4 * (256 * 256 * 9 + 256) + (256 * a * 5 * 9 + a * 5) + (256 * a * 4 * 9 + a * 4)
        return {
            "trainable_parameters": count_parameters(self.trainable_parameters()),
            "full_scale_configuration": decoder_parameter_count(full_cfg) + full_head,
            "full_scale_reference": FULL_SCALE_REFERENCE_PARAMS,
        }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, pipeline: Pipeline, extra: dict | None = None) -> None:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pipeline.trainable_parameters():
        write_tsr(root / "tensors" / f"{p.name}.tsr", p.value)
        entries.append({"name": p.name, "shape": list(p.value.shape), "kind": "parameter", "trainable": True})
    for name, buf in pipeline.named_buffers():
        write_tsr(root / "tensors" / f"{name}.tsr", Tensor._wrap(np.ascontiguousarray(buf)))
        entries.append({"name": name, "shape": list(buf.shape), "kind": "buffer", "trainable": False})
    manifest = {
        "format": "boxprompt-checkpoint-v1",
        "num_classes": pipeline.num_classes,
        "config": json.loads(pipeline.config.to_json()),
        "tensors": entries,
        "trainable_parameter_count": count_parameters(pipeline.trainable_parameters()),
    }
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path, config: RunConfig | None = None) -> Pipeline:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = config or RunConfig.from_json(json.dumps(manifest["config"]))
    pipeline = Pipeline(cfg, manifest["num_classes"])
    by_name = {p.name: p for p in pipeline.trainable_parameters()}
    buffers = dict(pipeline.named_buffers())
    mismatches = []
    for entry in manifest["tensors"]:
        t = read_tsr(root / "tensors" / f"{entry['name']}.tsr")
        if entry["kind"] == "parameter":
            p = by_name.get(entry["name"])
            if p is None or p.value.shape != t.shape:
                have = "absent" if p is None else str(p.value.shape)
                mismatches.append(f"{entry['name']}: checkpoint {t.shape} vs model {have}")
                continue
            p.assign(t.data)
        else:
            buf = buffers.get(entry["name"])
            if buf is None or buf.shape != t.shape:
                have = "absent" if buf is None else str(buf.shape)
                mismatches.append(f"{entry['name']}: checkpoint {t.shape} vs model {have}")
                continue
            buf[...] = t.data
    if mismatches:
        raise ConfigError("checkpoint/config shape mismatch:\n  " + "\n  ".join(mismatches))
    return pipeline


# ---------------------------------------------------------------------------
# training


def _batches(indices: list[int], batch_size: int) -> list[list[int]]:
    out = [list(indices[i : i + batch_size]) for i in range(0, len(indices), batch_size)]
    # z6 batch-norm needs >= 2 rows in train mode
    if len(out) >= 2 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def _stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _sample_targets(pipeline: Pipeline, samples: list[Sample]):
    labels, deltas, fg = [], [], []
    for s in samples:
        t = match_anchors(pipeline.anchors, s.boxes, s.classes)
        labels.append(t.labels)
        deltas.append(t.deltas)
        fg.append(t.foreground_mask)
    return np.stack(labels), np.stack(deltas), np.stack(fg)


def _batch_loss(pipeline: Pipeline, layers, labels, deltas_t, fg, train: bool):
    logits, deltas = pipeline.forward_features(layers, train=train)
    lf = focal_loss(logits, labels, pipeline.num_classes)
    lb = box_loss(deltas, deltas_t.astype(np.float32), fg)
    from .backend import add

    return add(lf, lb), float(lf.item()), float(lb.item())


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_focal: float
    train_box: float
    train_total: float
    val_total: float


def train(config: RunConfig, run_dir) -> dict:
    """Full training run; writes config.json, curves.csv, checkpoints/ and
    summary.json into run_dir. Returns the summary dict."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.time()

    samples, manifest = load_dataset(config.data_root)
    if not samples:
        raise ConfigError(f"dataset at {config.data_root} is empty")
    num_classes = config.num_classes or int(manifest["num_classes"])
    if any(s.size != config.image_size for s in samples):
        raise ConfigError("dataset image size differs from config.image_size")
    config = replace(config, num_classes=num_classes)
    config.to_json(run_dir / "config.json")

    pipeline = Pipeline(config, num_classes)
    frozen_before = [p.value.data.tobytes() for p in pipeline.frozen_parameters()]

    # deterministic split: validation tail of a seeded permutation
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xDA7A)))
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(config.val_fraction * len(samples))))
    val_idx = sorted(int(i) for i in order[:n_val])
    train_idx = sorted(int(i) for i in order[n_val:])
    if len(train_idx) < 2:
        # z6 batch-norm needs >= 2 rows per training batch
        raise ConfigError("need at least 2 training samples after the validation split")

    # precomputed targets + (when augmentation is off) cached encoder features
    cache_features = not config.augment and config.encoder_source == "toy"
    feature_cache: dict[int, list[np.ndarray]] = {}

    def layer_batch(idx_list: list[int], train_mode: bool) -> list[Tensor]:
        batch_samples = [samples[i] for i in idx_list]
        if config.augment and train_mode:
            batch_samples = [
                augment(s, config.seed ^ (0x5EED + i),
                        AugmentConfig(noise_sigma=config.aug_noise_sigma, jitter=config.aug_jitter))
                for s, i in zip(batch_samples, idx_list)
            ]
            return pipeline.features_from_images(_stack_images(batch_samples)), batch_samples
        if config.encoder_source == "import":
            return pipeline.features_from_archives([s.image_id for s in batch_samples]), batch_samples
        if cache_features:
            missing = [i for i in idx_list if i not in feature_cache]
            if missing:
                feats = pipeline.features_from_images(_stack_images([samples[i] for i in missing]))
                for row, i in enumerate(missing):
                    feature_cache[i] = [np.ascontiguousarray(l.data[row]) for l in feats]
            layers = []
            for l in range(config.layer_count):
                layers.append(Tensor._wrap(np.stack([feature_cache[i][l] for i in idx_list])))
            return layers, batch_samples
        return pipeline.features_from_images(_stack_images(batch_samples)), batch_samples

    # targets are static when augmentation is off; cache per sample index
    target_cache: dict[int, tuple] = {}

    def targets_for(batch: list[int], batch_samples: list[Sample]):
        if config.augment:
            return _sample_targets(pipeline, batch_samples)
        missing = [i for i in batch if i not in target_cache]
        for i in missing:
            t = match_anchors(pipeline.anchors, samples[i].boxes, samples[i].classes)
            target_cache[i] = (t.labels, t.deltas, t.foreground_mask)
        labels = np.stack([target_cache[i][0] for i in batch])
        deltas = np.stack([target_cache[i][1] for i in batch])
        fg = np.stack([target_cache[i][2] for i in batch])
        return labels, deltas, fg

    params = pipeline.trainable_parameters()
    opt = Adam(params, lr=config.lr)
    sched = ReduceLROnPlateau(config.lr, config.plateau_factor, config.plateau_patience, config.lr_floor)

    curves: list[EpochStats] = []
    best_val = np.inf
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xE70C, epoch)))
        perm = [train_idx[int(i)] for i in epoch_rng.permutation(len(train_idx))]
        focal_sum = box_sum = 0.0
        n_batches = 0
        for batch in _batches(perm, config.batch_size):
            layers, batch_samples = layer_batch(batch, train_mode=True)
            labels, deltas_t, fg = targets_for(batch, batch_samples)
            opt.zero_grad()
            with Tape() as tape:
                loss, lf, lb = _batch_loss(pipeline, layers, labels, deltas_t, fg, train=True)
            if not np.isfinite(loss.item()):
                raise TrainingAbort(f"non-finite loss at epoch {epoch} step {step}")
            tape.backward(loss)
            opt.step()
            focal_sum += lf
            box_sum += lb
            n_batches += 1
            step += 1

        # validation loss in eval mode
        val_total = 0.0
        v_batches = 0
        for batch in _batches(list(val_idx), config.batch_size):
            layers, batch_samples = layer_batch(batch, train_mode=False)
            labels, deltas_t, fg = targets_for(batch, batch_samples)
            loss, _, _ = _batch_loss(pipeline, layers, labels, deltas_t, fg, train=False)
            val_total += float(loss.item())
            v_batches += 1
        val_total /= max(1, v_batches)

        opt.lr = sched.step(val_total)
        stats = EpochStats(
            epoch=epoch,
            lr=sched.trace[-1],
            train_focal=focal_sum / max(1, n_batches),
            train_box=box_sum / max(1, n_batches),
            train_total=(focal_sum + box_sum) / max(1, n_batches),
            val_total=val_total,
        )
        curves.append(stats)
        if val_total < best_val:
            best_val = val_total
            save_checkpoint(run_dir / "checkpoints" / "best", pipeline,
                            {"epoch": epoch, "step": step, "val_loss": val_total})

    save_checkpoint(run_dir / "checkpoints" / "last", pipeline,
                    {"epoch": config.epochs, "step": step, "val_loss": curves[-1].val_total})

    with open(run_dir / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_focal", "train_box", "train_total", "val_total"])
        for s in curves:
            # full precision: these values feed bit-exactness and replay checks
            w.writerow([s.epoch, f"{s.lr:.17g}", f"{s.train_focal:.17g}", f"{s.train_box:.17g}",
                        f"{s.train_total:.17g}", f"{s.val_total:.17g}"])

    frozen_after = [p.value.data.tobytes() for p in pipeline.frozen_parameters()]
    frozen_ok = frozen_before == frozen_after
    if not frozen_ok:
        raise TrainingAbort("frozen encoder parameters changed during training")

    summary = {
        "epochs": config.epochs,
        "steps": step,
        "train_size": len(train_idx),
        "val_size": len(val_idx),
        "first_epoch_train_total": curves[0].train_total,
        "final_epoch_train_total": curves[-1].train_total,
        "first_epoch_train_focal": curves[0].train_focal,
        "final_epoch_train_focal": curves[-1].train_focal,
        "best_val_loss": best_val,
        "lr_trace": [s.lr for s in curves],
        "frozen_encoder_unchanged": frozen_ok,
        "wall_seconds": time.time() - t_start,
    }
    summary.update(pipeline.parameter_report())
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# inference + evaluation


def detect_sample(pipeline: Pipeline, sample: Sample) -> list[Detection]:
    cfg = pipeline.config
    if pipeline.config.encoder_source == "import":
        layers = pipeline.features_from_archives([sample.image_id])
    else:
        layers = pipeline.features_from_images(sample.image[None])
    logits, deltas = pipeline.forward_features(layers, train=False)
    dets = decode_and_filter(
        logits.data[0], deltas.data[0], pipeline.anchors, cfg.image_size,
        score_thr=cfg.score_threshold, max_det=cfg.max_detections,
    )
    return nms(dets, cfg.nms_iou)


def masks_for_detections(
    detections: list[Detection], sample: Sample, config: RunConfig, bridge_cmd: str | None = None
) -> np.ndarray:
    if bridge_cmd is None:
        return stub_mask_decoder(detections, config.image_size, mode=config.stub_mode)
    return _bridge_masks(detections, sample, config, bridge_cmd)


def _bridge_masks(detections, sample: Sample, config: RunConfig, bridge_cmd: str) -> np.ndarray:
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        td = Path(td)
        prompts = td / "prompts.json"
        out = td / "masks.tsr"
        img_path = td / "image.png"
        emit_prompts(detections, sample.image_id, prompts)
        img8 = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(img8.transpose(1, 2, 0)).save(img_path)
        cmd = shlex.split(bridge_cmd) + [
            "decode-masks", "--prompts", str(prompts), "--image", str(img_path), "--out", str(out),
        ]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise TrainingAbort(f"bridge command failed ({proc.returncode}): {proc.stderr.strip()}")
        masks = read_tsr(out).data
    if masks.ndim != 3 or masks.shape[0] != len(detections):
        raise TrainingAbort(f"bridge returned masks {masks.shape} for {len(detections)} prompts")
    return (masks > 0.5).astype(np.uint8)


def segmentation_from_detections(dets: list[Detection], masks: np.ndarray) -> InstanceSegmentation:
    classes = np.array([d.class_id for d in dets], np.int64)
    scores = np.array([d.score for d in dets], np.float64)
    return merge_masks(masks, classes, scores)


def ground_truth_detections(sample: Sample) -> list[Detection]:
    return [
        Detection(sample.boxes[i], int(sample.classes[i]), 1.0)
        for i in range(len(sample.boxes))
    ]


def evaluate(
    pipeline: Pipeline,
    samples: list[Sample],
    mode: str = "full",
    out_dir=None,
    oracle: bool = False,
    overlay_limit: int = 16,
    class_names: list[str] | None = None,
) -> MetricsReport:
    """Full pipeline evaluation. `oracle` substitutes ground-truth boxes and
    masks for the model outputs (self-consistency check)."""
    if mode not in ("bbox", "pq", "full"):
        raise ConfigError(f"unknown evaluate mode {mode!r}")
    cfg = pipeline.config
    k = pipeline.num_classes
    det_boxes, det_scores, det_classes = [], [], []
    gt_boxes, gt_classes = [], []
    pred_maps, pred_map_classes = [], []
    gt_maps, gt_map_classes = [], []
    pred_centroids, pred_centroid_classes = [], []
    gt_centroids, gt_centroid_classes = [], []
    dices = []

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "overlays").mkdir(parents=True, exist_ok=True)

    for n, sample in enumerate(samples):
        if oracle:
            dets = ground_truth_detections(sample)
        else:
            dets = detect_sample(pipeline, sample)
        det_boxes.append(np.array([d.box for d in dets]).reshape(-1, 4))
        det_scores.append(np.array([d.score for d in dets]))
        det_classes.append(np.array([d.class_id for d in dets], int))
        gt_boxes.append(sample.boxes)
        gt_classes.append(sample.classes)

        if mode in ("pq", "full"):
            if oracle:
                seg = InstanceSegmentation(
                    sample.seg.label_map.copy(), sample.seg.classes.copy(),
                    np.ones(sample.seg.num_instances),
                )
            else:
                masks = masks_for_detections(dets, sample, cfg)
                seg = segmentation_from_detections(dets, masks)
            pred_maps.append(seg.label_map)
            pred_map_classes.append(seg.classes)
            gt_maps.append(sample.seg.label_map)
            gt_map_classes.append(sample.seg.classes)
            dices.append(dice(seg.binary_mask(), sample.seg.binary_mask()))
            from .data import derive_boxes_and_centroids

            if seg.num_instances:
                _, cents = derive_boxes_and_centroids(seg.label_map)
            else:
                cents = np.zeros((0, 2))
            pred_centroids.append(cents)
            pred_centroid_classes.append(seg.classes)
            gt_centroids.append(sample.centroids)
            gt_centroid_classes.append(sample.classes)

        if out_dir is not None and n < overlay_limit:
            _save_overlay(out_dir / "overlays" / f"{sample.image_id}.png", sample, dets)

    names = class_names or [f"class{c}" for c in range(1, k + 1)]
    report = MetricsReport(num_classes=k, class_names=names)
    if mode in ("bbox", "full"):
        report.ap = average_precision(det_boxes, det_scores, gt_boxes)
        report.ap_per_class = average_precision_per_class(
            det_boxes, det_scores, det_classes, gt_boxes, gt_classes, k
        )
    if mode in ("pq", "full"):
        det_stats, per_class, confusion = centroid_prf(
            pred_centroids, pred_centroid_classes, gt_centroids, gt_centroid_classes,
            k, radius=cfg.centroid_radius,
        )
        report.detection = prf_dict(det_stats)
        present = {int(c) for ks in gt_map_classes for c in np.asarray(ks).reshape(-1)}
        report.per_class = {
            c: dict(prf_dict(per_class[c]), present=(c in present)) for c in per_class
        }
        report.confusion = confusion.tolist()
        report.bpq = panoptic_quality(gt_maps, gt_map_classes, pred_maps, pred_map_classes, mode="binary")
        report.mpq = panoptic_quality(
            gt_maps, gt_map_classes, pred_maps, pred_map_classes,
            mode="multiclass", num_classes=k, average=cfg.mpq_average,
        )
        report.dice = float(np.mean(dices)) if dices else None
        report.counts = {
            "images": len(samples),
            "gt_instances": int(sum(len(b) for b in gt_boxes)),
            "detections": int(sum(len(b) for b in det_boxes)),
        }
    if out_dir is not None:
        report.to_json(out_dir / "report.json")
        if report.confusion is not None:
            report.confusion_csv(out_dir / "confusion.csv")
    return report


_GT_COLOR = (60, 200, 60)
_PRED_COLOR = (230, 60, 60)


def _save_overlay(path, sample: Sample, dets: list[Detection]) -> None:
    img8 = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    im = Image.fromarray(img8.transpose(1, 2, 0)).convert("RGB")
    draw = ImageDraw.Draw(im)
    for b in sample.boxes:
        draw.rectangle([b[0], b[1], b[2] - 1, b[3] - 1], outline=_GT_COLOR)
    for d in dets:
        draw.rectangle([d.box[0], d.box[1], d.box[2] - 1, d.box[3] - 1], outline=_PRED_COLOR)
    im.save(path)


def detect_to_files(
    pipeline: Pipeline,
    sample: Sample,
    out_dir,
    emit_masks: bool = False,
    bridge_cmd: str | None = None,
) -> dict:
    """Run detection on one image; write PromptFile and, when requested,
    the instance map TSR1 plus an overlay PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dets = detect_sample(pipeline, sample)
    prompt_path = out_dir / f"{sample.image_id}.prompts.json"
    emit_prompts(dets, sample.image_id, prompt_path)
    outputs = {"prompts": str(prompt_path), "detections": len(dets)}
    if emit_masks:
        masks = masks_for_detections(dets, sample, pipeline.config, bridge_cmd)
        seg = segmentation_from_detections(dets, masks)
        mask_path = out_dir / f"{sample.image_id}.instances.tsr"
        write_tsr(mask_path, Tensor(seg.label_map.astype(np.float32)))
        overlay_path = out_dir / f"{sample.image_id}.overlay.png"
        _save_overlay(overlay_path, sample, dets)
        outputs["instances"] = str(mask_path)
        outputs["overlay"] = str(overlay_path)
        outputs["instance_count"] = seg.num_instances
    return outputs
