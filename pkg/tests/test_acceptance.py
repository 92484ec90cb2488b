"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion."""
import os
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from gweval.augment import SINGLE_IMAGE_OPS, AugmentConfig, Sample, run_pipeline
from gweval.cli import main
from gweval.fusion import nms, wbf_fuse
from gweval.geometry import BoundingBox, CanvasSize, TTATransform, inverse_transform_box, iou, transform_box
from gweval.ingest import (
    Detection,
    DomainManifest,
    GroundTruthSet,
    ImageAnnotation,
    PredictionSet,
    canonical_detections,
    serialize_domain_manifest,
    serialize_ground_truth,
    serialize_submission,
)
from gweval.matching import DEFAULT_THRESHOLDS, sweep_thresholds
from gweval.metrics import DegenerateVarianceError, evaluate, one_way_anova
from gweval.ranking import SubmissionScore, evaluate_submission, rank_delta, rank_table

from builders import golden_two_domain, make_augment_inputs, rank_divergence, run_augment, tree
from conftest import random_box, random_instance
from oracles import assert_round_trip, optimal_tp, random_prediction_set, reference_match


@pytest.fixture
def verdict(capsys):
    """Print a PASS/FAIL line for a criterion (outside output capture), then assert it."""

    def check(name: str, failures: list, detail: str = ""):
        ok = not failures
        with capsys.disabled():
            line = f"\n[{'PASS' if ok else 'FAIL'}] {name}"
            if detail:
                line += f" ({detail})"
            if not ok:
                line += f": {len(failures)} failure(s), first: {failures[0]}"
            print(line)
        assert ok, failures[:5]

    return check


def test_metric_properties(verdict):
    rng = random.Random(20240601)
    failures = []
    start = time.perf_counter()
    oracle_checks = 0
    for case in range(1000):
        gt, preds = random_instance(rng, max_boxes=30)
        sweep = sweep_thresholds(gt, preds)
        prev_tp = None
        for r in sweep:
            if r.tp + r.fn != len(gt) or r.tp + r.fp != len(preds):
                failures.append(f"case {case}: counts not conserved at {r.threshold}")
            if prev_tp is not None and r.tp > prev_tp:
                failures.append(f"case {case}: tp rose at {r.threshold}")
            prev_tp = r.tp
            if reference_match(gt, preds, r.threshold)[:3] != (r.tp, r.fp, r.fn):
                failures.append(f"case {case}: disagrees with reference matcher at {r.threshold}")
        pg, pp = gt[:], preds[:]
        rng.shuffle(pg)
        rng.shuffle(pp)
        if [(r.tp, r.fp, r.fn) for r in sweep_thresholds(pg, pp)] != [(r.tp, r.fp, r.fn) for r in sweep]:
            failures.append(f"case {case}: input order changed counts")
        if len(gt) <= 5 and len(preds) <= 5:
            oracle_checks += 1
            for r in sweep:
                if r.tp > optimal_tp(gt, preds, r.threshold):
                    failures.append(f"case {case}: greedy beat the optimum at {r.threshold}")
    # dedicated small instances so the exhaustive oracle sees many cases
    for case in range(1000):
        gt, preds = random_instance(rng, max_boxes=5)
        oracle_checks += 1
        for r in sweep_thresholds(gt, preds, keep_pairs=False):
            if r.tp > optimal_tp(gt, preds, r.threshold):
                failures.append(f"small case {case}: greedy beat the optimum at {r.threshold}")
    elapsed = time.perf_counter() - start
    if elapsed >= 30:
        failures.append(f"runtime {elapsed:.1f}s >= 30s")
    verdict("metric property suite", failures, f"{elapsed:.1f}s, {oracle_checks} exhaustive-oracle instances")


def test_global_and_domain_means_agree(verdict):
    rng = random.Random(7)
    failures = []
    canvas = CanvasSize(100, 100)
    for case in range(500):
        n_domains, per_domain = rng.randint(1, 5), rng.randint(1, 6)
        images, preds, domains = {}, {}, {}
        for d in range(n_domains):
            for i in range(per_domain):
                gt, ps = random_instance(rng, max_boxes=6)
                key = f"d{d}_{i}"
                images[key] = ImageAnnotation(canvas, tuple(gt))
                preds[key] = tuple(ps)
                domains[key] = f"dom{d}"
        r = evaluate(GroundTruthSet(images), PredictionSet("p", preds), DomainManifest(domains))
        if r.kaggle_accuracy != r.weighted_accuracy:
            failures.append(f"case {case}: {r.kaggle_accuracy!r} != {r.weighted_accuracy!r}")
    gt, domains, preds = golden_two_domain()
    r = evaluate(gt, preds, domains)
    if (r.kaggle_accuracy, r.weighted_accuracy) != (0.5, 0.375):
        failures.append(f"two-domain fixture gave {r.kaggle_accuracy}, {r.weighted_accuracy}")
    verdict("equal-size domains: global mean == domain mean; fixture 0.5 / 0.375", failures)


def test_ranking_reproduction(verdict):
    scores = [SubmissionScore(n, s, s) for n, s in (("first", 0.6897), ("second", 0.6879), ("third", 0.6839))]
    random.Random(3).shuffle(scores)
    table = rank_table(scores)
    failures = []
    got = [(r.rank, r.name) for r in table.rows]
    if got != [(1, "first"), (2, "second"), (3, "third")]:
        failures.append(f"ranks {got}")
    d = rank_delta(table, table)
    if any(c.delta != 0 for c in d.changes) or d.spearman != 1.0:
        failures.append(f"self delta {d}")
    verdict("winning scores rank 1, 2, 3; self-delta zero with Spearman 1.0", failures)


def test_rank_divergence(verdict):
    gt, domains, submissions = rank_divergence()
    scores = [evaluate_submission(p, gt, domains) for p in submissions]
    kaggle, weighted = rank_table(scores, "kaggle"), rank_table(scores, "weighted")
    failures = []
    if kaggle.rank_of("dominant") != 1:
        failures.append(f"dominant ranks {kaggle.rank_of('dominant')} on the global metric")
    if weighted.rank_of("dominant") <= 1:
        failures.append("dominant still ranks 1 on the domain-balanced metric")
    detail = f"global rank {kaggle.rank_of('dominant')}, domain-balanced rank {weighted.rank_of('dominant')}"
    verdict("rank divergence: largest-domain specialist drops under domain weighting", failures, detail)


def test_fusion_suite(verdict):
    rng = random.Random(11)
    failures = []

    one = Detection(BoundingBox(3, 4, 20, 30), 0.6897)
    if wbf_fuse([[one]]) != [one]:
        failures.append("single box changed by fusion")
    for case in range(1000):
        dets = nms([Detection(random_box(rng), rng.random()) for _ in range(rng.randint(0, 20))], 0.55)
        if wbf_fuse([dets]) != list(canonical_detections(dets)):
            failures.append(f"case {case}: single source not preserved")

    box = BoundingBox(0, 0, 10, 10)
    fused = wbf_fuse([[Detection(box, 0.6)], [Detection(box, 0.8)]])
    if len(fused) != 1 or tuple(fused[0].box) != tuple(box) or abs(fused[0].confidence - 0.7) > 1e-12:
        failures.append(f"two-source agreement gave {fused}")

    for case in range(1000):
        dets = [Detection(random_box(rng), rng.choice([0.2, 0.5, 0.8, rng.random()])) for _ in range(rng.randint(0, 25))]
        thr = rng.choice([0.3, 0.5, 0.7])
        kept = nms(dets, thr)
        if any(iou(a.box, b.box) > thr for i, a in enumerate(kept) for b in kept[i + 1 :]):
            failures.append(f"nms case {case}: kept set overlaps")
        if nms(kept, thr) != kept:
            failures.append(f"nms case {case}: not idempotent")

    for t in TTATransform:
        for case in range(1000):
            w, h = rng.randint(1, 4096), rng.randint(1, 4096)
            canvas = CanvasSize(w, h)
            # dyadic coordinates are exactly representable, so the round trip can be exact
            xs = sorted(rng.sample(range(w * 64 + 1), 2))
            ys = sorted(rng.sample(range(h * 64 + 1), 2))
            b = BoundingBox(xs[0] / 64, ys[0] / 64, xs[1] / 64, ys[1] / 64)
            back = inverse_transform_box(transform_box(b, t, canvas), t, canvas)
            if tuple(back) != tuple(b):
                failures.append(f"{t.value}: {b} came back as {back}")
    verdict("fusion suite: WBF identity, agreement 0.7, NMS antichain/idempotence, TTA round trip", failures)


def _random_config(rng: random.Random) -> AugmentConfig:
    ops = sorted(SINGLE_IMAGE_OPS)
    groups = tuple(tuple(rng.sample(ops, rng.randint(1, 3))) for _ in range(rng.randint(0, 3)))
    return AugmentConfig(
        groups=groups,
        cutmix=rng.random() < 0.6,
        mixup=rng.random() < 0.6,
        mosaic=rng.random() < 0.6,
        probability=rng.choice([0.0, 0.3, 0.5, 1.0]),
        stage_probabilities={"mosaic": rng.random()},
        mixup_weight=rng.uniform(0.1, 0.9),
        keep_fraction=rng.choice([0.0, 0.25, 0.5, 1.0]),
    )


def test_augmentation_determinism(verdict, tmp_path):
    failures = []
    img_dir, ann = make_augment_inputs(tmp_path, 16)
    cfg = {"groups": [["horizontal-flip", "vertical-flip", "rotate-90"], ["brightness", "channel-shuffle"]],
           "cutmix": True, "mixup": True, "mosaic": True, "probability": 0.5}
    codes = [run_augment(tmp_path, img_dir, ann, cfg, 42, tmp_path / f"run{i}") for i in (1, 2)]
    if codes != [0, 0]:
        failures.append(f"exit statuses {codes}")
    elif tree(tmp_path / "run1") != tree(tmp_path / "run2"):
        failures.append("seed-42 output trees differ")

    if run_augment(tmp_path, img_dir, ann, {**cfg, "probability": 0.0}, 42, tmp_path / "zero") != 0:
        failures.append("probability-0 run failed")
    else:
        for p in sorted(img_dir.iterdir()):
            if (tmp_path / "zero" / "images" / p.name).read_bytes() != p.read_bytes():
                failures.append(f"probability 0 changed {p.name}")
        if (tmp_path / "zero" / "annotations.csv").read_text() != ann.read_text():
            failures.append("probability 0 changed the annotations")

    rng = random.Random(5)
    np_rng = np.random.default_rng(5)
    for trial in range(10_000):
        cfg_t = _random_config(rng)
        n = max(cfg_t.min_batch, rng.randint(1, 6))
        sizes = [(rng.randint(4, 24), rng.randint(4, 24))] * n if rng.random() < 0.8 else [
            (rng.randint(4, 24), rng.randint(4, 24)) for _ in range(n)]
        batch = []
        for w, h in sizes:
            boxes = tuple(random_box(rng, size=min(w, h), max_side=min(w, h)) for _ in range(rng.randint(0, 4)))
            batch.append(Sample(np_rng.integers(0, 256, (h, w, 3), dtype=np.uint8), boxes))
        for s in run_pipeline(batch, cfg_t, seed=trial):
            bad = [b for b in s.boxes if not s.size.contains(b)]
            if bad:
                failures.append(f"trial {trial}: {bad[0]} outside {tuple(s.size)}")
    verdict("augmentation determinism, probability-0 identity, boxes in canvas over 10,000 runs", failures)


def test_parser_round_trip_and_exit_statuses(verdict, tmp_path):
    failures = []
    rng = random.Random(77)
    for case in range(1000):
        p = random_prediction_set(rng)
        try:
            assert_round_trip(p)
        except AssertionError as exc:
            failures.append(f"case {case}: {exc}")

    gt, domains, preds = golden_two_domain()
    (tmp_path / "gt.csv").write_text(serialize_ground_truth(gt, domains))
    (tmp_path / "domains.csv").write_text(serialize_domain_manifest(domains))
    (tmp_path / "ok.csv").write_text(serialize_submission(preds))

    def evaluate_cli(pred=None, gt_text=None, domains_text=None, extra=()):
        name = f"case{len(list(tmp_path.iterdir()))}"
        paths = {}
        for key, text, default in (("pred", pred, "ok.csv"), ("gt", gt_text, "gt.csv"), ("domains", domains_text, "domains.csv")):
            if text is None:
                paths[key] = tmp_path / default
            else:
                paths[key] = tmp_path / f"{name}_{key}.csv"
                paths[key].write_text(text)
        out = tmp_path / f"{name}.json"
        code = main(["evaluate", "--gt", str(paths["gt"]), "--pred", str(paths["pred"]),
                     "--domains", str(paths["domains"]), "--out", str(out), *extra])
        return code, out.exists()

    head = "image_id,PredictionString\n"
    cases = [
        ("bad submission header", dict(pred="id,pred\ni1,0.9 1 2 3 4\n"), 2),
        ("token count not a multiple of 5", dict(pred=head + "i1,0.9 1 2 3\n"), 2),
        ("non-numeric token", dict(pred=head + "i1,0.9 x 2 3 4\n"), 2),
        ("confidence above 1", dict(pred=head + "i1,1.2 1 2 3 4\n"), 2),
        ("duplicate image row", dict(pred=head + "i1,0.9 1 2 3 4\ni1,0.9 1 2 3 4\n"), 2),
        ("bad ground-truth header", dict(gt_text="image,w,h\n"), 2),
        ("ground-truth bbox unparsable", dict(gt_text="image_id,width,height,bbox,domain\ni1,100,100,[1,2,3],A\n"), 2),
        ("image without a domain", dict(domains_text="image_id,domain\ni1,A\n"), 3),
        ("bad threshold range", dict(extra=("--thresholds", "0.9:0.1:0.05")), 4),
        ("unknown option", dict(extra=("--bogus",)), 4),
    ]
    for label, kwargs, expected in cases:
        code, wrote = evaluate_cli(**kwargs)
        if code != expected:
            failures.append(f"{label}: exit {code}, expected {expected}")
        if wrote:
            failures.append(f"{label}: report written despite the error")
    if evaluate_cli() != (0, True):
        failures.append("well-formed inputs did not succeed")
    verdict("parser round trip on 1,000 sets; malformed inputs give documented exit statuses", failures)


def test_anova_exact(verdict):
    failures = []
    f, df_b, df_w = one_way_anova([[Fraction(0), Fraction(1, 5)], [Fraction(4, 5), Fraction(1)]])
    if (f, df_b, df_w) != (Fraction(32), 1, 2):
        failures.append(f"got F={f}, df=({df_b}, {df_w})")
    f0, _, _ = one_way_anova([[Fraction(1, 10), Fraction(3, 10)], [Fraction(1, 10), Fraction(3, 10)]])
    if f0 != 0:
        failures.append(f"identical groups gave F={f0}")
    try:
        one_way_anova([[0.5, 0.5], [0.7, 0.7]])
        failures.append("zero within-group variance was not refused")
    except DegenerateVarianceError:
        pass
    verdict("ANOVA: F = 32 exactly with df (1, 2); identical groups give F = 0", failures)


def test_performance(verdict, monkeypatch):
    monkeypatch.setenv("GWEVAL_THREADS", "1")
    rng = np.random.default_rng(2024)
    n_images, n_boxes = 10_000, 50
    canvas = CanvasSize(1100, 1100)
    images, preds, domains = {}, {}, {}
    for i in range(n_images):
        xy = rng.uniform(0, 1000, (n_boxes, 2))
        wh = rng.uniform(10, 100, (n_boxes, 2))
        jitter = rng.normal(0, 4, (n_boxes, 2))
        conf = rng.random(n_boxes)
        gt = tuple(BoundingBox(x, y, x + w, y + h) for (x, y), (w, h) in zip(xy.tolist(), wh.tolist()))
        ps = tuple(
            Detection(BoundingBox(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy), c)
            for b, (dx, dy), c in zip(gt, jitter.tolist(), conf.tolist())
        )
        key = f"img{i:05d}"
        images[key], preds[key], domains[key] = ImageAnnotation(canvas, gt), ps, f"d{i % 10}"
    gt_set, pred_set = GroundTruthSet(images), PredictionSet("perf", preds)
    start = time.perf_counter()
    report = evaluate(gt_set, pred_set, DomainManifest(domains), DEFAULT_THRESHOLDS)
    elapsed = time.perf_counter() - start
    failures = []
    if elapsed >= 10:
        failures.append(f"{elapsed:.2f}s >= 10s")
    if report.n != n_images or len(report.thresholds) != 6:
        failures.append("report does not cover every image and threshold")
    verdict("performance: 10,000 images x 50 boxes x 6 thresholds single-threaded", failures,
            f"{elapsed:.2f}s, threads={os.environ['GWEVAL_THREADS']}")
