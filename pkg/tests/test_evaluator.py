import math

import numpy as np
import pandas as pd
import pytest

from conftest import read_tsv
from layout_data.errors import TaxonomyMismatchError
from layout_data.types import BBox, Dataset, Instance, InstanceMask, PageRecord, Subset, Taxonomy
from layout_engine.evaluator import (EvalConfig, EvalResult, compare_runs, default_iou_thresholds, evaluate,
                                     evaluate_by_subset, format_report_table, per_category_report, read_results,
                                     write_results)

TAXONOMY = Taxonomy.from_names("demo", ["paragraph", "title", "figure"])


def _gt(pages, taxonomy=TAXONOMY, size=100):
    """pages: {image_id: [(category_id, (x0, y0, x1, y1)), ...]}"""
    return Dataset(taxonomy, tuple(
        PageRecord(i, size, size, instances=tuple(Instance(c, BBox(*b)) for c, b in insts))
        for i, insts in sorted(pages.items())))


def _preds(pages):
    """pages: {image_id: [(category_id, (x0, y0, x1, y1), score), ...]}"""
    return {i: [Instance(c, BBox(*b), score=s) for c, b, s in insts] for i, insts in pages.items()}


def _with_scores(d, score=1.0):
    return d.with_pages([p.with_instances([Instance(i.category_id, i.bbox, i.mask, score) for i in p.instances])
                         for p in d.pages])


def _box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _oracle_ap(gt_pages, pred_pages, category, threshold):
    """Explicit PR curve: per-image greedy matching, global score ranking, 101-point interpolation."""
    n_gt = sum(1 for insts in gt_pages.values() for c, _ in insts if c == category)
    if n_gt == 0:
        return None
    ranked = []
    for image_id in sorted(gt_pages):
        gts = [b for c, b in gt_pages[image_id] if c == category]
        dets = [(s, k, b) for k, (c, b, s) in enumerate(pred_pages.get(image_id, [])) if c == category]
        dets.sort(key=lambda d: -d[0])
        free = [True] * len(gts)
        for score, k, box in dets:
            best, best_iou = None, threshold
            for g, gbox in enumerate(gts):
                v = _box_iou(box, gbox)
                if free[g] and v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = g, v
            if best is not None:
                free[best] = False
            ranked.append((score, image_id, k, best is not None))
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = fp = 0
    curve = []
    for *_, hit in ranked:
        tp, fp = tp + hit, fp + (not hit)
        curve.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        total += max([p for rec, p in curve if rec >= r], default=0.0)
    return total / 101


def _random_case(rng):
    n_images = int(rng.integers(1, 11))
    n_objects = int(rng.integers(1, 21))
    gt_pages = {i: [] for i in range(1, n_images + 1)}
    for _ in range(n_objects):
        x0, y0 = rng.uniform(0, 70, size=2)
        w, h = rng.uniform(5, 30, size=2)
        gt_pages[int(rng.integers(1, n_images + 1))].append((int(rng.integers(1, 4)), (x0, y0, x0 + w, y0 + h)))
    pred_pages = {}
    for image_id, insts in gt_pages.items():
        preds = []
        for c, (x0, y0, x1, y1) in insts:
            if rng.random() < 0.8:
                j = rng.normal(0, 3, size=4)
                label = c if rng.random() < 0.9 else int(rng.integers(1, 4))
                xs = sorted((x0 + j[0], x1 + j[2]))
                ys = sorted((y0 + j[1], y1 + j[3]))
                preds.append((label, (xs[0], ys[0], xs[1], ys[1]), float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            x0, y0 = rng.uniform(0, 70, size=2)
            preds.append((int(rng.integers(1, 4)), (x0, y0, x0 + 20, y0 + 20), float(rng.random())))
        pred_pages[image_id] = preds
    return gt_pages, pred_pages


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    thresholds = default_iou_thresholds()
    for _ in range(200):
        gt_pages, pred_pages = _random_case(rng)
        result = evaluate(_preds(pred_pages), _gt(gt_pages))
        expected = []
        for row, category in enumerate(TAXONOMY.ids):
            aps = [_oracle_ap(gt_pages, pred_pages, category, t) for t in thresholds]
            if aps[0] is None:
                assert np.isnan(result.ap[row]).all()
                continue
            assert np.allclose(result.ap[row], aps, atol=1e-6)
            expected.extend(aps)
        assert result.mAP == pytest.approx(np.mean(expected), abs=1e-6)


def test_single_prediction_at_iou_point_six():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    preds = _preds({1: [(1, (0, 0, 6, 10), 0.9)]})
    r = evaluate(preds, gt)
    assert r.mAP == pytest.approx(0.3)
    assert r.AP50 == 1.0
    assert r.AP75 == 0.0
    assert r.AR == pytest.approx(0.3)
    assert list(r.ap[0]) == [1.0, 1.0, 1.0] + [0.0] * 7


def test_ground_truth_as_predictions_is_perfect(three_pages):
    preds = _with_scores(three_pages)
    for mode in ("boxes", "masks"):
        r = evaluate(preds, three_pages, mode=mode)
        assert (r.mAP, r.AP50, r.AP75, r.AR) == (1.0, 1.0, 1.0, 1.0)


def test_no_predictions_scores_zero():
    r = evaluate({}, _gt({1: [(1, (0, 0, 10, 10))]}))
    assert r.mAP == 0.0
    assert r.AR == 0.0


def test_categories_without_ground_truth_are_nan():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    r = evaluate(_preds({1: [(1, (0, 0, 10, 10), 0.8), (3, (50, 50, 60, 60), 0.7)]}), gt)
    ap = r.category_ap()
    assert ap["paragraph"] == 1.0
    assert math.isnan(ap["title"]) and math.isnan(ap["figure"])
    assert r.mAP == 1.0


def test_duplicate_detection_is_a_false_positive():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    r = evaluate(_preds({1: [(1, (0, 0, 10, 10), 0.9), (1, (0, 0, 10, 10), 0.8)]}), gt)
    assert r.mAP == 1.0
    r = evaluate(_preds({1: [(1, (30, 30, 40, 40), 0.9), (1, (0, 0, 10, 10), 0.8)]}), gt)
    # precision 1/2 at full recall
    assert r.mAP == pytest.approx(0.5)


def test_max_dets_truncates_by_score():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    preds = _preds({1: [(1, (30, 30, 40, 40), 0.9), (1, (0, 0, 10, 10), 0.8)]})
    assert evaluate(preds, gt, EvalConfig(max_dets=1)).mAP == 0.0


def test_mask_mode_uses_pixels(three_pages):
    preds = _with_scores(three_pages)
    page = preds.pages[0]
    inst = page.instances[0]
    # same box, mask shifted out of most of it
    shifted = InstanceMask.from_polygons([[30, 10, 70, 10, 70, 30, 30, 30]])
    moved = page.with_instances([Instance(inst.category_id, inst.bbox, shifted, 1.0)] + list(page.instances[1:]))
    preds = preds.with_pages([moved] + list(preds.pages[1:]))
    assert evaluate(preds, three_pages, mode="boxes").mAP == 1.0
    assert evaluate(preds, three_pages, mode="masks").mAP < 1.0


def test_parallel_matches_sequential():
    rng = np.random.default_rng(8)
    gt_pages, pred_pages = _random_case(rng)
    a = evaluate(_preds(pred_pages), _gt(gt_pages), workers=1)
    b = evaluate(_preds(pred_pages), _gt(gt_pages), workers=3)
    assert np.array_equal(a.ap, b.ap, equal_nan=True)


def test_strictly_monotone_score_transforms_leave_ap_unchanged():
    rng = np.random.default_rng(31)
    for _ in range(50):
        gt_pages, pred_pages = _random_case(rng)
        base = evaluate(_preds(pred_pages), _gt(gt_pages))
        for transform in (lambda s: s ** 3, lambda s: 0.5 * s + 0.1, lambda s: math.exp(s) - 7.0):
            moved = {i: [(c, b, transform(s)) for c, b, s in insts] for i, insts in pred_pages.items()}
            result = evaluate(_preds(moved), _gt(gt_pages))
            assert np.array_equal(result.ap, base.ap, equal_nan=True)
            assert np.array_equal(result.recall, base.recall, equal_nan=True)


def _integer_case(rng):
    """Integer boxes inside a 100 x 100 page, so filled-box rasters have exactly the box area."""
    gt_pages, pred_pages = {}, {}
    for image_id in range(1, int(rng.integers(2, 6)) + 1):
        gts, preds = [], []
        for _ in range(int(rng.integers(1, 6))):
            x0, y0 = (int(v) for v in rng.integers(0, 70, size=2))
            w, h = (int(v) for v in rng.integers(5, 30, size=2))
            c = int(rng.integers(1, 4))
            gts.append((c, (x0, y0, x0 + w, y0 + h)))
            j = [int(v) for v in rng.integers(-3, 4, size=4)]
            box = (max(0, x0 + j[0]), max(0, y0 + j[1]), min(100, x0 + w + j[2]), min(100, y0 + h + j[3]))
            preds.append((c if rng.random() < 0.9 else int(rng.integers(1, 4)), box, float(rng.random())))
        gt_pages[image_id], pred_pages[image_id] = gts, preds
    return gt_pages, pred_pages


def _gt_with_box_masks(pages):
    return Dataset(TAXONOMY, tuple(
        PageRecord(i, 100, 100, instances=tuple(
            Instance(c, BBox(x0, y0, x1, y1), InstanceMask.from_polygons([[x0, y0, x1, y0, x1, y1, x0, y1]]))
            for c, (x0, y0, x1, y1) in insts))
        for i, insts in sorted(pages.items())))


def test_box_only_predictions_score_the_same_in_both_modes_when_masks_are_boxes():
    rng = np.random.default_rng(12)
    for _ in range(20):
        gt_pages, pred_pages = _integer_case(rng)
        gt = _gt_with_box_masks(gt_pages)
        boxes = evaluate(_preds(pred_pages), gt, mode="boxes")
        masks = evaluate(_preds(pred_pages), gt, mode="masks")
        assert np.allclose(masks.ap, boxes.ap, atol=1e-12, equal_nan=True)
        assert masks.mAP == pytest.approx(boxes.mAP, abs=1e-12)


def test_page_order_does_not_matter():
    rng = np.random.default_rng(44)
    for _ in range(20):
        gt_pages, pred_pages = _random_case(rng)
        gt = _gt(gt_pages)
        base = evaluate(_preds(pred_pages), gt)
        order = rng.permutation(len(gt.pages))
        shuffled = gt.with_pages([gt.pages[k] for k in order])
        preds = _preds(pred_pages)
        shuffled_preds = {i: preds[i] for i in rng.permutation(sorted(preds)).tolist()}
        result = evaluate(shuffled_preds, shuffled)
        assert np.array_equal(result.ap, base.ap, equal_nan=True)
        assert np.array_equal(result.recall, base.recall, equal_nan=True)


def test_input_checks(three_pages):
    other = Dataset(Taxonomy.from_names("other", ["a", "b", "c"]), three_pages.pages)
    with pytest.raises(TaxonomyMismatchError):
        evaluate(_with_scores(other), three_pages)
    with pytest.raises(TaxonomyMismatchError):
        evaluate(_preds({1: [(7, (0, 0, 5, 5), 0.5)]}), three_pages)
    with pytest.raises(ValueError):
        evaluate({1: [Instance(1, BBox(0, 0, 5, 5))]}, three_pages)
    with pytest.raises(ValueError):
        evaluate(_preds({42: [(1, (0, 0, 5, 5), 0.5)]}), three_pages)
    with pytest.raises(ValueError):
        evaluate({}, three_pages, mode="keypoints")
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(0.75, 0.5)).validate()


def test_by_subset(three_pages):
    results = evaluate_by_subset(_with_scores(three_pages), three_pages)
    assert set(results) == {Subset.TEXTBOOK, Subset.BOOK, Subset.NOTE}
    assert all(r.mAP == 1.0 for r in results.values())


def test_report_table_layout():
    df = pd.DataFrame({"category": ["a", "b", "c", "d"], "AP": [1.0, 0.5, float("nan"), 0.25]})
    lines = format_report_table(df, columns=3).splitlines()
    assert lines[0] == "Category | AP | Category | AP | Category | AP"
    assert lines[2] == "a | 100.000 | b | 50.000 | c | nan"
    assert lines[3] == "d | 25.000"


def test_per_category_report_covers_the_taxonomy():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    df = per_category_report(evaluate(_preds({1: [(1, (0, 0, 10, 10), 0.8)]}), gt))
    assert list(df["category"]) == list(TAXONOMY.names)
    assert df["AP"].isna().sum() == 2


def _ablation_result(run):
    row = next(r for r in read_tsv("ablation_components.tsv") if r["run"] == run)
    return EvalResult.from_summary("boxes", *(float(row[f"det_{k}"]) for k in ("mAP", "AP50", "AP75", "AR")))


def test_compare_reproduces_the_encoder_ablation():
    diff = compare_runs(_ablation_result("no_encoder"), _ablation_result("full"))
    assert list(diff["metric"])[0] == "AP50"
    assert diff.set_index("metric").loc["mAP", "delta"] == pytest.approx(-16.7)


def test_compare_identical_runs_is_all_zero(tmp_path, three_pages):
    r = evaluate(_with_scores(three_pages), three_pages)
    path = write_results([r], tmp_path / "results.jsonl")
    again = read_results(path)[0]
    diff = compare_runs(r, again)
    assert (diff["delta"] == 0.0).all()
    assert len(diff) == 4 + len(three_pages.taxonomy)


def test_compare_refuses_mixed_modes():
    with pytest.raises(ValueError):
        compare_runs(EvalResult.from_summary("boxes", 0.5), EvalResult.from_summary("masks", 0.5))
    with pytest.raises(TaxonomyMismatchError):
        compare_runs(EvalResult.from_summary("boxes", 0.5, taxonomy_id="a"),
                     EvalResult.from_summary("boxes", 0.5, taxonomy_id="b"))


def test_record_round_trip_keeps_nan():
    gt = _gt({1: [(1, (0, 0, 10, 10))]})
    r = evaluate(_preds({1: [(1, (0, 0, 10, 10), 0.8)]}), gt)
    again = EvalResult.from_record(r.to_record())
    assert np.array_equal(again.ap, r.ap, equal_nan=True)
    assert again.category_names == r.category_names
    assert again.taxonomy_id == "demo"
