"""Acceptance criteria. Each test enforces one criterion at its stated
tolerance and prints a PASS line with the measured values (visible with
pytest -s; pytest -v gives the per-criterion pass/fail listing either way).

The desk-scale end-to-end criterion trains the full 50-epoch synthetic run
once (session fixture) and shares its artifacts with the freeze-contract
and scheduler-contract criteria.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from boxprompt.backend import (
    Parameter,
    RunningStats,
    Tape,
    Tensor,
    add,
    batchnorm2d,
    check_input_gradients,
    check_parameter_gradients,
    concat_channels,
    conv2d,
    downsample2x,
    linear1x1,
    relu,
    subsample2x,
    sum_all,
    upsample2x,
)
from boxprompt.data import SynthConfig, load_dataset, synth_generate
from boxprompt.decoder import DecoderConfig, PyramidDecoder
from boxprompt.head import (
    AnchorConfig,
    DetectionHead,
    anchor_count,
    box_loss,
    decode_deltas,
    encode_deltas,
    focal_loss,
    generate_anchors,
    match_anchors,
)
from boxprompt.metrics import dice, mask_iou, match_centroids, pq_image_stats, average_precision
from boxprompt.postprocess import Detection, nms
from boxprompt.train import Pipeline, ReduceLROnPlateau, RunConfig, evaluate, train
from oracles import ap_ref, hungarian_ref, nms_ref, pq_ref
from scipy.optimize import linear_sum_assignment

GRAD_EPS = 1e-4
GRAD_RTOL = 1e-5

# desk-scale configuration: smallest faithful instantiation of the pipeline
# (the criterion pins dataset size, K, epochs and thresholds; resolution and
# widths are config choices)
DESK = dict(
    image_size=128, patch_size=8, embed_dim=32, channels=24, batch_size=8,
    epochs=50, augment=False, anchor_base_multiplier=2.0, val_fraction=0.1,
    seed=1234, encoder_seed=7, score_threshold=0.4,
)
DESK_TRAIN_SEED = 1234
DESK_TEST_SEED = 1235


def report(name: str, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# criterion: gradient correctness, >= 50 random small configs, < 2 min


class TestGradientCorrectness:
    def test_every_primitive_and_composed_network(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(20240801)
        configs = 0
        worst = 0.0

        def p(shape, scale=0.6, off=0.0):
            return Parameter(Tensor(rng.normal(off, scale, shape)))

        # conv2d: kernels 1/3, strides 1/2, with/without bias (12 configs)
        for _ in range(12):
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2]))
            h = int(rng.choice([5, 7])) if s == 2 else int(rng.choice([4, 6]))
            ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = Tensor(rng.normal(0, 1, (2, ci, h, h)))
            w, b = p((co, ci, k, k)), p((co,), off=0.15)
            err = check_parameter_gradients(
                lambda: sum_all(relu(conv2d(x, w, b, stride=s, padding=k // 2))),
                [w, b], rng, coords_per_param=3, eps=GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        # batchnorm2d train mode (8 configs)
        for _ in range(8):
            c = int(rng.integers(1, 4))
            x = Tensor(rng.normal(0, 1.5, (3, c, 4, 4)))
            g, beta = p((c,), off=1.0, scale=0.2), p((c,), off=0.2)
            stats = RunningStats(c, dtype=np.float64)
            err = check_parameter_gradients(
                lambda: sum_all(relu(batchnorm2d(x, g, beta, stats, train=True))),
                [g, beta], rng, coords_per_param=3, eps=GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        # downsample2x / linear1x1 (8 configs)
        for _ in range(4):
            ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = Tensor(rng.normal(0, 1, (2, ci, 6, 6)))
            w = p((co, ci, 2, 2))
            err = check_parameter_gradients(
                lambda: sum_all(relu(downsample2x(x, w))), [w], rng, 4, GRAD_EPS)
            worst = max(worst, err)
            configs += 1
        for _ in range(4):
            ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = Tensor(rng.normal(0, 1, (2, ci, 4, 4)))
            w, b = p((co, ci)), p((co,), off=0.2)
            err = check_parameter_gradients(
                lambda: sum_all(relu(linear1x1(x, w, b))), [w, b], rng, 4, GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        # resampling/add/concat input gradients (8 configs)
        for _ in range(8):
            w = p((2, 4, 3, 3))

            def forward(t):
                up = upsample2x(t)
                both = concat_channels([subsample2x(up), t])
                y = conv2d(both, w, None, padding=1)
                return add(sum_all(relu(y)), sum_all(t))

            err = check_input_gradients(forward, rng.normal(0, 1, (1, 2, 4, 4)), rng, 5, GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        # losses (10 configs)
        for _ in range(5):
            labels = rng.integers(-1, 3, 10)
            err = check_input_gradients(
                lambda t: focal_loss(t, labels, 2), rng.normal(0, 1.5, (10, 2)), rng, 6, GRAD_EPS)
            worst = max(worst, err)
            configs += 1
        for _ in range(5):
            fg = rng.random(8) < 0.5
            target = rng.normal(0, 0.5, (8, 4))
            err = check_input_gradients(
                lambda t: box_loss(t, target, fg), rng.normal(0, 0.5, (8, 4)), rng, 6, GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        # composed decoder+head with full training loss (6 configs)
        anchors = np.concatenate(generate_anchors((32, 16, 8, 4, 2, 1), 256, AnchorConfig()))
        gt_boxes = np.array([[40, 40, 90, 90], [130, 150, 180, 200.0]])
        targets = match_anchors(anchors, gt_boxes, np.array([1, 2]))
        labels2 = np.stack([targets.labels] * 2)
        deltas2 = np.stack([targets.deltas.astype(np.float64)] * 2)
        fg2 = np.stack([targets.foreground_mask] * 2)
        for trial in range(6):
            dc = DecoderConfig(channels=3, in_channels=2, base_size=16)
            build = np.random.default_rng(300 + trial)
            dec = PyramidDecoder(dc, build, dtype=np.float64)
            head = DetectionHead(3, 2, AnchorConfig(), build, dtype=np.float64)
            params = dec.parameters() + head.parameters()
            for prm in params:
                jit = rng.normal(0, 0.05, prm.value.shape)
                if prm.name.endswith(".bias") or prm.name.endswith(".beta"):
                    jit = rng.uniform(0.08, 0.2, prm.value.shape) * rng.choice([-1.0, 1.0], prm.value.shape)
                prm.assign(prm.value.data + jit)
            blocks = [[Tensor(rng.normal(0, 1, (2, 2, 16, 16))) for _ in range(3)] for _ in range(4)]

            def forward():
                logits, deltas = head.forward(dec.forward(blocks, train=True))
                return add(focal_loss(logits, labels2, 2), box_loss(deltas, deltas2, fg2))

            subset = [prm for i, prm in enumerate(params) if i % 6 == trial]
            err = check_parameter_gradients(forward, subset, rng, coords_per_param=1, eps=GRAD_EPS)
            worst = max(worst, err)
            configs += 1

        elapsed = time.perf_counter() - t0
        assert configs >= 50
        assert worst < GRAD_RTOL
        assert elapsed < 120.0
        report("gradient-correctness",
               f"{configs} configs, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion: anchor algebra


class TestAnchorAlgebra:
    def test_count_and_codec_identity(self):
        assert anchor_count((32, 16, 8, 4, 2, 1), AnchorConfig()) == 12285
        levels = generate_anchors((32, 16, 8, 4, 2, 1), 256, AnchorConfig())
        assert sum(len(v) for v in levels) == 12285

        rng = np.random.default_rng(77)
        n = 10_000
        anchors = np.zeros((n, 4))
        anchors[:, 0] = rng.uniform(0, 220, n)
        anchors[:, 1] = rng.uniform(0, 220, n)
        anchors[:, 2] = anchors[:, 0] + rng.uniform(4, 80, n)
        anchors[:, 3] = anchors[:, 1] + rng.uniform(4, 80, n)
        boxes = np.zeros((n, 4))
        boxes[:, 0] = rng.uniform(0, 220, n)
        boxes[:, 1] = rng.uniform(0, 220, n)
        boxes[:, 2] = boxes[:, 0] + rng.uniform(2, 160, n)
        boxes[:, 3] = boxes[:, 1] + rng.uniform(2, 160, n)
        err = np.abs(decode_deltas(anchors, encode_deltas(anchors, boxes)) - boxes).max()
        assert err < 1e-5
        report("anchor-algebra", f"12285 anchors, codec max err {err:.2e} over {n} boxes")


# ---------------------------------------------------------------------------
# criterion: focal loss point checks


class TestFocalPointChecks:
    def test_point_values_and_reduction(self):
        perfect = focal_loss(Tensor(np.array([[40.0]], np.float64)), np.array([1]), 1).item()
        assert perfect == 0.0

        half = focal_loss(Tensor(np.array([[0.0]], np.float64)), np.array([1]), 1).item()
        assert abs(half - 0.086643) <= 1e-6

        rng = np.random.default_rng(5)
        logits = rng.normal(0, 2, (64, 3))
        labels = rng.integers(0, 4, 64)
        got = focal_loss(Tensor(logits), labels, 3, alpha=0.5, gamma=0.0).item()
        onehot = np.zeros((64, 3))
        for i, c in enumerate(labels):
            if c >= 1:
                onehot[i, c - 1] = 1
        pr = 1 / (1 + np.exp(-logits))
        bce = -(onehot * np.log(pr) + (1 - onehot) * np.log(1 - pr)).sum()
        want = 0.5 * bce / max(1, (labels >= 1).sum())
        rel = abs(got - want) / abs(want)
        assert rel < 1e-6
        report("focal-point-checks",
               f"p_t=1 -> 0; p_t=.5 -> {half:.6f}; gamma=0 reduction rel err {rel:.2e}")


# ---------------------------------------------------------------------------
# criterion: oracle equivalence


class TestOracleEquivalence:
    def test_nms_vs_bruteforce_1000_sets(self):
        rng = np.random.default_rng(99)
        checked = 0
        for _ in range(1000):
            n = int(rng.integers(0, 201))
            boxes = np.zeros((n, 4))
            boxes[:, 0] = rng.uniform(0, 120, n)
            boxes[:, 1] = rng.uniform(0, 120, n)
            boxes[:, 2] = boxes[:, 0] + rng.uniform(1, 40, n)
            boxes[:, 3] = boxes[:, 1] + rng.uniform(1, 40, n)
            scores = np.round(rng.random(n), 3)
            classes = rng.integers(1, 4, n)
            dets = [Detection(b, int(c), float(s)) for b, c, s in zip(boxes, classes, scores)]
            got = sorted((tuple(d.box), d.class_id, d.score) for d in nms(dets, 0.5))
            ref = nms_ref(boxes.tolist(), scores.tolist(), classes.tolist(), 0.5)
            want = sorted((tuple(boxes[i]), int(classes[i]), float(scores[i])) for i in ref)
            assert got == want
            checked += 1
        report("oracle-nms", f"{checked} random sets, exact match")

    def test_pq_vs_exhaustive(self):
        rng = np.random.default_rng(100)
        checked = 0
        for _ in range(200):
            size = 18
            def inst_map():
                m = np.zeros((size, size), np.int32)
                placed = 0
                for _ in range(int(rng.integers(0, 8))):
                    s = int(rng.integers(2, 6))
                    r, c = rng.integers(0, size - s, 2)
                    if (m[r:r + s, c:c + s] == 0).all():
                        placed += 1
                        m[r:r + s, c:c + s] = placed
                return m
            g, p = inst_map(), inst_map()
            if g.max() > 7 or p.max() > 7:
                continue
            got = pq_image_stats(g, p).pq
            gm = [frozenset(zip(*np.nonzero(g == i))) for i in range(1, g.max() + 1)]
            pm = [frozenset(zip(*np.nonzero(p == i))) for i in range(1, p.max() + 1)]
            assert got == pytest.approx(pq_ref(gm, pm), abs=1e-12)
            checked += 1
        assert checked >= 150
        report("oracle-pq", f"{checked} instance sets vs exhaustive matching")

    def test_ap_vs_enumeration(self):
        rng = np.random.default_rng(101)
        checked = 0
        for _ in range(200):
            n_img = int(rng.integers(1, 3))
            det_boxes, det_scores, gt_boxes, dets_ref, gts_ref = [], [], [], [], []
            for _ in range(n_img):
                ng, nd = int(rng.integers(0, 5)), int(rng.integers(0, 7))
                g = np.zeros((ng, 4))
                g[:, :2] = rng.uniform(0, 40, (ng, 2))
                g[:, 2:] = g[:, :2] + rng.uniform(5, 20, (ng, 2))
                d = np.zeros((nd, 4))
                d[:, :2] = rng.uniform(0, 40, (nd, 2))
                d[:, 2:] = d[:, :2] + rng.uniform(5, 20, (nd, 2))
                for i in range(min(ng, nd)):
                    if rng.random() < 0.5:
                        d[i] = g[i] + rng.normal(0, 0.8, 4)
                s = np.round(rng.random(nd), 2)
                det_boxes.append(d); det_scores.append(s); gt_boxes.append(g)
                dets_ref.append([(d[i].tolist(), float(s[i])) for i in range(nd)])
                gts_ref.append(g.tolist())
            got = average_precision(det_boxes, det_scores, gt_boxes)
            want = ap_ref(dets_ref, gts_ref, 0.5)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)
            checked += 1
        report("oracle-ap", f"{checked} random detection sets vs PR enumeration")

    def test_hungarian_vs_exhaustive(self):
        rng = np.random.default_rng(102)
        for _ in range(150):
            n, m = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            if max(n, m) > 7:
                continue
            pred = rng.uniform(0, 25, (n, 2))
            gt = rng.uniform(0, 25, (m, 2))
            d = np.linalg.norm(pred[:, None] - gt[None, :], axis=2)
            cost = np.where(d <= 12.0, d, 1e9).tolist()
            best_cost, _ = hungarian_ref(cost)
            rows, cols = linear_sum_assignment(np.array(cost))
            assert sum(cost[r][c] for r, c in zip(rows, cols)) == pytest.approx(best_cost)
            got = match_centroids(pred, gt, 12.0)
            feasible = sum(1 for r, c in zip(rows, cols) if d[r, c] <= 12.0)
            assert len(got.pairs) == feasible
        report("oracle-hungarian", "150 assignments vs exhaustive enumeration")

    def test_dice_iou_relation_1e9(self):
        rng = np.random.default_rng(103)
        worst = 0.0
        for _ in range(1000):
            a = rng.random((10, 10)) < rng.uniform(0.1, 0.8)
            b = rng.random((10, 10)) < rng.uniform(0.1, 0.8)
            if a.sum() + b.sum() == 0:
                continue
            i = mask_iou(a, b)
            worst = max(worst, abs(dice(a, b) - 2 * i / (1 + i)))
        assert worst < 1e-9
        report("oracle-dice-iou", f"1000 mask pairs, worst deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# desk-scale end-to-end run (shared by three criteria)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train_root = root / "train_ds"
    test_root = root / "test_ds"
    t0 = time.perf_counter()
    synth_generate(SynthConfig(seed=DESK_TRAIN_SEED, count=500, image_size=128, num_classes=2), train_root)
    synth_generate(SynthConfig(seed=DESK_TEST_SEED, count=100, image_size=128, num_classes=2), test_root)

    config = RunConfig(data_root=str(train_root), **DESK)
    summary = train(config, root / "run")
    pipeline_cfg = RunConfig.from_json(root / "run" / "config.json")
    from boxprompt.train import load_checkpoint

    pipeline = load_checkpoint(root / "run" / "checkpoints" / "best")
    test_samples, _ = load_dataset(test_root)
    report_obj = evaluate(pipeline, test_samples, mode="full", out_dir=root / "eval")
    wall = time.perf_counter() - t0
    return {
        "root": root,
        "config": pipeline_cfg,
        "summary": summary,
        "report": report_obj,
        "wall": wall,
        "test_samples": test_samples,
    }


class TestDeskScaleEndToEnd:
    def test_blank_image_yields_few_detections(self, desk_run):
        # an all-background image through the trained model produces at most
        # a handful of detections above threshold
        from boxprompt.data import Sample
        from boxprompt.postprocess import InstanceSegmentation
        from boxprompt.train import detect_sample, load_checkpoint

        pipeline = load_checkpoint(desk_run["root"] / "run" / "checkpoints" / "best")
        rng = np.random.default_rng(4)
        blank = np.clip(
            np.full((3, 128, 128), 0.82, np.float32) + rng.normal(0, 0.03, (3, 128, 128)).astype(np.float32),
            0, 1,
        )
        empty = InstanceSegmentation(np.zeros((128, 128), np.int32), np.zeros(0, int), np.zeros(0))
        dets = detect_sample(pipeline, Sample("blank", blank, empty))
        assert len(dets) <= 5, f"{len(dets)} detections on a blank image"
        report("blank-image-detections", f"{len(dets)} detections above threshold")

    def test_thresholds_and_runtime(self, desk_run):
        s = desk_run["summary"]
        r = desk_run["report"]
        loss_ratio = s["final_epoch_train_total"] / s["first_epoch_train_total"]
        focal_ratio = s["final_epoch_train_focal"] / s["first_epoch_train_focal"]
        assert loss_ratio <= 0.5, f"train loss ratio {loss_ratio:.3f}"
        assert focal_ratio <= 0.5, f"train focal ratio {focal_ratio:.3f}"
        assert r.ap is not None and r.ap >= 0.6, f"AP {r.ap}"
        f1 = r.detection["f1"]
        assert f1 >= 0.7, f"centroid F1 {f1}"
        assert r.bpq >= 0.4, f"bPQ {r.bpq}"
        assert desk_run["wall"] <= 1800.0, f"runtime {desk_run['wall']:.0f}s"
        report(
            "desk-scale-end-to-end",
            f"loss ratio {loss_ratio:.3f}, AP {r.ap:.3f}, F1 {f1:.3f}, "
            f"bPQ {r.bpq:.3f}, {desk_run['wall']:.0f}s",
        )


class TestFreezeContract:
    def test_encoder_bit_identical_after_training(self, desk_run):
        # the training loop verifies byte equality itself and records it
        assert desk_run["summary"]["frozen_encoder_unchanged"] is True
        # independent re-check: rebuild the seeded encoder and compare the
        # checkpointed pipeline's encoder parameters against a fresh copy
        from boxprompt.encoder import ToyEncoder

        cfg = desk_run["config"]
        fresh = ToyEncoder(cfg.encoder_config(), cfg.encoder_seed)
        from boxprompt.train import load_checkpoint

        pipeline = load_checkpoint(desk_run["root"] / "run" / "checkpoints" / "best")
        for a, b in zip(fresh.parameters(), pipeline.encoder.parameters()):
            assert a.value.data.tobytes() == b.value.data.tobytes(), a.name
        report("freeze-contract", "encoder parameters bit-identical to initialization")


class TestSchedulerContract:
    def test_lr_trace_from_desk_run(self, desk_run):
        trace = desk_run["summary"]["lr_trace"]
        assert all(a >= b for a, b in zip(trace, trace[1:])), "lr increased"
        assert min(trace) >= 3e-7 - 1e-18, "floor violated"
        # reductions only after >= patience non-improving epochs: replay the
        # recorded validation curve through an independent reference
        import csv as _csv

        with open(desk_run["root"] / "run" / "curves.csv") as f:
            rows = list(_csv.DictReader(f))
        vals = [float(r["val_total"]) for r in rows]
        ref = ReduceLROnPlateau(desk_run["config"].lr, desk_run["config"].plateau_factor,
                                desk_run["config"].plateau_patience, desk_run["config"].lr_floor)
        for v in vals:
            ref.step(v)
        assert [f"{x:.12g}" for x in ref.trace] == [f"{x:.12g}" for x in trace]
        report("scheduler-contract",
               f"{len(set(trace))} distinct lr values, floor respected")


# ---------------------------------------------------------------------------
# criterion: determinism (reduced-size twin runs)


class TestDeterminism:
    def test_identical_seed_runs_bit_identical(self, tmp_path):
        ds = tmp_path / "ds"
        synth_generate(SynthConfig(seed=55, count=24, image_size=128, num_classes=2), ds)
        cfg = dict(
            data_root=str(ds), image_size=128, patch_size=8, embed_dim=16, channels=16,
            batch_size=4, epochs=3, augment=False, anchor_base_multiplier=2.0,
            val_fraction=0.2, seed=99, encoder_seed=4,
        )
        train(RunConfig(**cfg), tmp_path / "a")
        train(RunConfig(**cfg), tmp_path / "b")
        files_a = sorted((tmp_path / "a" / "checkpoints" / "last" / "tensors").iterdir())
        files_b = sorted((tmp_path / "b" / "checkpoints" / "last" / "tensors").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for x, y in zip(files_a, files_b):
            assert x.read_bytes() == y.read_bytes(), x.name
        from boxprompt.train import load_checkpoint

        samples, _ = load_dataset(ds)
        ra = evaluate(load_checkpoint(tmp_path / "a" / "checkpoints" / "last"), samples, "full").to_json()
        rb = evaluate(load_checkpoint(tmp_path / "b" / "checkpoints" / "last"), samples, "full").to_json()
        assert ra == rb
        report("determinism", "twin runs: checkpoints and metric reports bit-identical")


# ---------------------------------------------------------------------------
# criterion: self-consistency oracle


class TestSelfConsistency:
    def test_gt_against_itself_exact_ones(self, tmp_path):
        ds = tmp_path / "ds"
        synth_generate(SynthConfig(seed=66, count=10, image_size=128, num_classes=2), ds)
        samples, _ = load_dataset(ds)
        cfg = RunConfig(data_root=str(ds), image_size=128, patch_size=8, embed_dim=8,
                        channels=16, augment=False, num_classes=2)
        pipeline = Pipeline(cfg, 2)
        r = evaluate(pipeline, samples, mode="full", oracle=True)
        assert r.ap == 1.0
        assert r.bpq == 1.0
        assert r.dice == 1.0
        assert r.detection["f1"] == 1.0
        report("self-consistency", "AP=1, bPQ=1, dice=1, F1=1 exactly")
