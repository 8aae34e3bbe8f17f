"""Evaluator fidelity: IoU primitives against counting oracles, greedy
matching against an exhaustive reimplementation, PR/AP/AR arithmetic on
hand-computed fractions, and a fully hand-traced three-image fixture."""

from fractions import Fraction

import numpy as np
import pytest

from pyrafuse.evaluation import (
    EvalConfig,
    EvalSummary,
    average_precision,
    average_recall,
    box_iou,
    evaluate,
    mask_iou,
    match_greedy,
    pr_curve,
    summarize,
    write_report,
)
from pyrafuse.errors import UsageError
from pyrafuse.scenes import rasterize_mask

# Three images, two categories, five detections. Worked matching, by hand:
#   cat 1: gt A = img1 [0,0,100,100], gt B = img2 [200,200,100,100]
#     det .9 hits A exactly (TP everywhere); det .8 duplicates A (always FP);
#     det .7 covers half of B (IoU 0.5: TP at the 0.50 threshold only).
#     AP@0.50 = 253/303, AP@rest = 51/101; mean 163/303. AR_100 = 0.55.
#   cat 2: gt C = img3 [0,0,80,80] (area 6400), gt D = img3 [300,300,20,20]
#     (area 400, the only small gt). det .6 hits C exactly; det .5 is D
#     shifted by 2px (IoU 324/476 ~ 0.68: TP up to the 0.65 threshold).
#     AP = (4*1 + 6*(51/101))/10 = 213/303. AR_100 = 0.7. AP_S/AR_S: only D
#     counts; its det matches at 4 of 10 thresholds -> 0.4.
#   Overall: AP = 188/303, AP50 = 278/303, AP75 = 51/101, AR_1 = 0.525,
#   AR_10 = AR_100 = 0.625.
FIXTURE_IMAGES = [{"id": i, "width": 400, "height": 400} for i in (1, 2, 3)]
FIXTURE_CATEGORIES = [{"id": 1, "name": "u"}, {"id": 2, "name": "v"}]
FIXTURE_GTS = [
    {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 100, 100], "area": 10000},
    {"id": 2, "image_id": 2, "category_id": 1, "bbox": [200, 200, 100, 100], "area": 10000},
    {"id": 3, "image_id": 3, "category_id": 2, "bbox": [0, 0, 80, 80], "area": 6400},
    {"id": 4, "image_id": 3, "category_id": 2, "bbox": [300, 300, 20, 20], "area": 400},
]
FIXTURE_DETS = [
    {"image_id": 1, "category_id": 1, "bbox": [0, 0, 100, 100], "score": 0.9},
    {"image_id": 1, "category_id": 1, "bbox": [0, 0, 100, 100], "score": 0.8},
    {"image_id": 2, "category_id": 1, "bbox": [200, 200, 100, 50], "score": 0.7},
    {"image_id": 3, "category_id": 2, "bbox": [0, 0, 80, 80], "score": 0.6},
    {"image_id": 3, "category_id": 2, "bbox": [302, 302, 20, 20], "score": 0.5},
]
FIXTURE_EXPECTED = {
    "AP": Fraction(188, 303), "AP50": Fraction(278, 303), "AP75": Fraction(51, 101),
    "AP_S": Fraction(2, 5), "AR_1": Fraction(21, 40), "AR_10": Fraction(5, 8),
    "AR_100": Fraction(5, 8), "AR_S": Fraction(2, 5),
}


class TestBoxIou:
    def test_identity(self):
        assert box_iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0

    def test_disjoint_and_touching(self):
        assert box_iou((0, 0, 10, 10), (20, 0, 10, 10)) == 0.0
        assert box_iou((0, 0, 10, 10), (10, 0, 10, 10)) == 0.0

    def test_quarter_overlap_unit_squares(self):
        # overlap 1, union 4 + 4 - 1
        assert box_iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-12)

    def test_contained(self):
        assert box_iou((0, 0, 10, 10), (2, 2, 5, 5)) == pytest.approx(0.25)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = tuple(rng.uniform(0, 20, 2)) + tuple(rng.uniform(1, 20, 2))
            b = tuple(rng.uniform(0, 20, 2)) + tuple(rng.uniform(1, 20, 2))
            assert box_iou(a, b) == pytest.approx(box_iou(b, a), abs=1e-15)

    def test_matches_pixel_counting_on_integer_boxes(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            ax, ay, bx, by = rng.integers(0, 20, 4)
            aw, ah, bw, bh = rng.integers(1, 15, 4)
            grid = np.zeros((40, 40), dtype=np.int32)
            grid[ay:ay + ah, ax:ax + aw] += 1
            grid[by:by + bh, bx:bx + bw] += 2
            inter = int((grid == 3).sum())
            union = int((grid > 0).sum())
            assert box_iou((ax, ay, aw, ah), (bx, by, bw, bh)) == \
                pytest.approx(inter / union, abs=1e-12)


class TestMaskIou:
    def test_identity_and_disjoint(self):
        a = np.zeros((8, 8), dtype=bool)
        a[:4] = True
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, ~a) == 0.0

    def test_empty_union(self):
        z = np.zeros((4, 4), dtype=bool)
        assert mask_iou(z, z) == 0.0

    def test_random_vs_counting(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.random((12, 12)) > 0.5
            b = rng.random((12, 12)) > 0.5
            inter = sum(bool(a[i, j]) and bool(b[i, j])
                        for i in range(12) for j in range(12))
            union = sum(bool(a[i, j]) or bool(b[i, j])
                        for i in range(12) for j in range(12))
            expect = inter / union if union else 0.0
            assert mask_iou(a, b) == pytest.approx(expect, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError, match="shapes"):
            mask_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


def exhaustive_greedy(dets, gts, thresh):
    """Independent greedy matcher: walk detections by descending score; each
    takes the free gt with the highest IoU >= thresh (later index on ties)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i]["score"])
    det_match = [-1] * len(dets)
    gt_match = [-1] * len(gts)
    for row, di in enumerate(order):
        best, m = thresh - 1e-12, -1
        for g in range(len(gts)):
            if gt_match[g] >= 0:
                continue
            v = box_iou(dets[di]["bbox"], gts[g]["bbox"])
            if v >= best and v >= thresh:
                best, m = v, g
        if m >= 0:
            det_match[row] = m
            gt_match[m] = row
    return det_match, gt_match


class TestMatchGreedy:
    def test_single_true_positive(self):
        res = match_greedy([{"score": 0.9, "bbox": (0, 0, 10, 10)}],
                           [{"bbox": (0, 0, 10, 10)}],
                           lambda d, g: box_iou(d["bbox"], g["bbox"]), 0.5)
        assert res.det_match == [0] and res.gt_match == [0]

    def test_duplicate_detection_is_unmatched(self):
        dets = [{"score": 0.9, "bbox": (0, 0, 10, 10)},
                {"score": 0.8, "bbox": (0, 0, 10, 10)}]
        res = match_greedy(dets, [{"bbox": (0, 0, 10, 10)}],
                           lambda d, g: box_iou(d["bbox"], g["bbox"]), 0.5)
        assert res.det_match == [0, -1]

    def test_higher_score_matches_first(self):
        dets = [{"score": 0.2, "bbox": (0, 0, 10, 10)},
                {"score": 0.9, "bbox": (1, 1, 10, 10)}]
        res = match_greedy(dets, [{"bbox": (0, 0, 10, 10)}],
                           lambda d, g: box_iou(d["bbox"], g["bbox"]), 0.5)
        assert res.order == [1, 0]
        assert res.det_match == [0, -1]  # positionally: best-scored det won

    def test_random_cases_match_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            dets = [{"score": float(rng.random()),
                     "bbox": tuple(rng.uniform(0, 30, 2)) + tuple(rng.uniform(5, 25, 2))}
                    for _ in range(4)]
            gts = [{"bbox": tuple(rng.uniform(0, 30, 2)) + tuple(rng.uniform(5, 25, 2))}
                   for _ in range(3)]
            res = match_greedy(dets, gts,
                               lambda d, g: box_iou(d["bbox"], g["bbox"]), 0.3)
            exp_det, exp_gt = exhaustive_greedy(dets, gts, 0.3)
            assert res.det_match == exp_det
            assert res.gt_match == exp_gt


class TestCurves:
    def test_all_true_positives(self):
        pr, rc = pr_curve(np.array([1, 1, 1]), 3)
        np.testing.assert_allclose(pr, 1.0)
        np.testing.assert_allclose(rc, [1 / 3, 2 / 3, 1.0])

    def test_mixed_flags_precision(self):
        pr, rc = pr_curve(np.array([1, -1, 1]), 2)
        np.testing.assert_allclose(pr, [1.0, 0.5, 2 / 3], atol=1e-12)
        np.testing.assert_allclose(rc, [0.5, 0.5, 1.0])

    def test_ignored_entries_advance_nothing(self):
        pr, rc = pr_curve(np.array([1, 0, 1]), 2)
        np.testing.assert_allclose(rc, [0.5, 0.5, 1.0])
        np.testing.assert_allclose(pr, [1.0, 1.0, 1.0], atol=1e-12)

    def test_envelope_lifts_sawtooth(self):
        # precision [1, .5, 2/3] must be read through its right-to-left
        # envelope [1, 2/3, 2/3]: AP = (51 + 50*(2/3))/101 = 253/303
        pr, rc = pr_curve(np.array([1, -1, 1]), 2)
        ap = average_precision(pr, rc, EvalConfig().recall_points)
        assert ap == pytest.approx(float(Fraction(253, 303)), abs=1e-12)

    def test_perfect_detector_ap_one(self):
        pr, rc = pr_curve(np.array([1, 1]), 2)
        assert average_precision(pr, rc, EvalConfig().recall_points) == 1.0

    def test_half_recall_perfect_precision(self):
        # recall tops out at 0.5: 51 of 101 sample points see precision 1
        pr, rc = pr_curve(np.array([1]), 2)
        ap = average_precision(pr, rc, EvalConfig().recall_points)
        assert ap == pytest.approx(51 / 101, abs=1e-12)

    def test_nothing_found_ap_zero(self):
        pr, rc = pr_curve(np.array([-1, -1]), 2)
        assert average_precision(pr, rc, EvalConfig().recall_points) == 0.0

    def test_average_recall_direct(self):
        assert average_recall(np.ones((10, 4)), 4) == 1.0
        assert average_recall(np.array([[1, -1], [-1, -1]]), 2) == 0.25
        assert average_recall(np.zeros((10, 0)), 3) == 0.0
        assert average_recall(np.ones((10, 2)), 0) == -1.0


class TestFixture:
    def test_summary_matches_hand_trace_exactly(self):
        summary = summarize(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES,
                            FIXTURE_CATEGORIES)
        for key, value in summary.to_dict().items():
            assert value == pytest.approx(float(FIXTURE_EXPECTED[key]), abs=1e-12), key

    def test_ap_is_mean_of_per_threshold_aps(self):
        res = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        m100 = res.config.max_dets.index(100)
        per_threshold = []
        for ti in range(len(res.config.iou_thresholds)):
            block = res.precision[ti, :, :, 0, m100]
            per_threshold.append(block[block > -1].mean())
        assert res.summary.ap == pytest.approx(np.mean(per_threshold), abs=1e-9)

    def test_overall_ap_is_mean_of_categories(self):
        res = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        cat_aps = [row["AP"] for row in res.per_category]
        assert res.summary.ap == pytest.approx(np.mean(cat_aps), abs=1e-12)
        assert [row["name"] for row in res.per_category] == ["u", "v"]

    def test_deterministic_across_runs(self):
        a = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        b = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        np.testing.assert_array_equal(a.precision, b.precision)
        np.testing.assert_array_equal(a.recall, b.recall)
        assert a.summary == b.summary


def replay_dets(gts, score=1.0):
    return [{"image_id": g["image_id"], "category_id": g["category_id"],
             "bbox": list(g["bbox"]), "score": score,
             **({"segmentation": g["segmentation"]} if "segmentation" in g else {})}
            for g in gts]


class TestEvaluateEndToEnd:
    def test_gt_replay_is_perfect(self):
        summary = summarize(FIXTURE_GTS, replay_dets(FIXTURE_GTS), FIXTURE_IMAGES,
                            FIXTURE_CATEGORIES)
        one = pytest.approx(1.0, abs=1e-12)
        assert summary.ap == one and summary.ap50 == one and summary.ap75 == one
        assert summary.ar_100 == 1.0 and summary.ar_small == 1.0

    def test_no_detections_zero_ap(self):
        summary = summarize(FIXTURE_GTS, [], FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        assert summary.ap == 0.0 and summary.ar_100 == 0.0

    def test_no_ground_truth_gives_sentinels(self):
        summary = summarize([], FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        assert all(v == -1.0 for v in summary.to_dict().values())

    def test_ar_1_with_two_gts_per_image(self):
        gts = [{"id": 1, "image_id": 1, "category_id": 1,
                "bbox": [0, 0, 10, 10], "area": 100},
               {"id": 2, "image_id": 1, "category_id": 1,
                "bbox": [50, 50, 10, 10], "area": 100}]
        summary = summarize(gts, replay_dets(gts, 0.9), [{"id": 1, "width": 100,
                                                          "height": 100}],
                            [{"id": 1, "name": "u"}])
        assert summary.ar_1 == 0.5
        assert summary.ar_10 == 1.0 and summary.ar_100 == 1.0

    def test_ar_monotone_in_max_dets_on_random_cases(self):
        rng = np.random.default_rng(4)
        images = [{"id": i, "width": 100, "height": 100} for i in (1, 2)]
        cats = [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}]
        for _ in range(20):
            gts, dets, gid = [], [], 0
            for img in (1, 2):
                for cat in (1, 2):
                    for _ in range(int(rng.integers(1, 4))):
                        gid += 1
                        x, y = rng.uniform(0, 70, 2)
                        w, h = rng.uniform(5, 30, 2)
                        gts.append({"id": gid, "image_id": img, "category_id": cat,
                                    "bbox": [x, y, w, h], "area": w * h})
                    for _ in range(int(rng.integers(0, 6))):
                        x, y = rng.uniform(0, 70, 2)
                        w, h = rng.uniform(5, 30, 2)
                        dets.append({"image_id": img, "category_id": cat,
                                     "bbox": [x, y, w, h],
                                     "score": float(rng.random())})
            s = summarize(gts, dets, images, cats)
            assert -1.0 <= s.ar_1 <= s.ar_10 + 1e-12
            assert s.ar_10 <= s.ar_100 + 1e-12

    def test_area_range_is_half_open(self):
        # area exactly 32^2 is not small; one unit less is
        images = [{"id": 1, "width": 100, "height": 100}]
        cats = [{"id": 1, "name": "u"}]
        at_bound = [{"id": 1, "image_id": 1, "category_id": 1,
                     "bbox": [0, 0, 32, 32], "area": 1024}]
        below = [{"id": 1, "image_id": 1, "category_id": 1,
                  "bbox": [0, 0, 32, 32], "area": 1023}]
        assert summarize(at_bound, replay_dets(at_bound), images, cats).ap_small == -1.0
        assert summarize(below, replay_dets(below), images, cats).ap_small == \
            pytest.approx(1.0, abs=1e-12)

    def test_mask_task_disagrees_with_box_when_shapes_differ(self):
        # same bbox, complementary triangles: box replay is perfect, mask is not
        images = [{"id": 1, "width": 100, "height": 100}]
        cats = [{"id": 1, "name": "u"}]
        tri_gt = [0.0, 0.0, 40.0, 0.0, 0.0, 40.0]
        tri_det = [40.0, 0.0, 40.0, 40.0, 0.0, 40.0]
        gt_mask = rasterize_mask(np.reshape(tri_gt, (-1, 2)), 100, 100)
        gts = [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 40, 40],
                "area": int(gt_mask.sum()), "segmentation": [tri_gt]}]
        dets = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 40, 40],
                 "score": 0.9, "segmentation": [tri_det]}]
        assert summarize(gts, dets, images, cats, task="box").ap == \
            pytest.approx(1.0, abs=1e-12)
        assert summarize(gts, dets, images, cats, task="mask").ap == 0.0

    def test_mask_replay_is_perfect(self):
        images = [{"id": 1, "width": 100, "height": 100}]
        cats = [{"id": 1, "name": "u"}]
        poly = [10.0, 10.0, 50.0, 14.0, 44.0, 60.0, 12.0, 52.0]
        mask = rasterize_mask(np.reshape(poly, (-1, 2)), 100, 100)
        gts = [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 40, 50],
                "area": int(mask.sum()), "segmentation": [poly]}]
        assert summarize(gts, replay_dets(gts), images, cats,
                         task="mask").ap == pytest.approx(1.0, abs=1e-12)

    def test_unknown_task(self):
        with pytest.raises(UsageError, match="task"):
            evaluate([], [], [], [], task="keypoints")

    def test_inputs_not_mutated(self):
        import copy
        gts = copy.deepcopy(FIXTURE_GTS)
        dets = copy.deepcopy(FIXTURE_DETS)
        evaluate(gts, dets, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        assert gts == FIXTURE_GTS and dets == FIXTURE_DETS


class TestReport:
    def test_report_and_csv_round_trip(self, tmp_path):
        import csv as csv_mod
        import json
        res = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        write_report(tmp_path / "report.json", {"box": res})
        with open(tmp_path / "report.json") as fh:
            payload = json.load(fh)
        assert payload["box"]["summary"]["AP"] == res.summary.ap
        with open(tmp_path / "metrics.csv", newline="") as fh:
            rows = list(csv_mod.reader(fh))
        assert rows[0] == ["task", "category", "AP", "AP50", "AP75", "AP_S",
                           "AR_1", "AR_10", "AR_100", "AR_S"]
        assert rows[1][:2] == ["box", "all"]
        assert [r[1] for r in rows[2:]] == ["u", "v"]
        # repr cells reparse to the exact float
        assert float(rows[1][2]) == res.summary.ap

    def test_report_bytes_deterministic(self, tmp_path):
        res = evaluate(FIXTURE_GTS, FIXTURE_DETS, FIXTURE_IMAGES, FIXTURE_CATEGORIES)
        write_report(tmp_path / "a" / "report.json", {"box": res})
        write_report(tmp_path / "b" / "report.json", {"box": res})
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
            (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_summary_sentinels_default(self):
        assert all(v == -1.0 for v in EvalSummary().to_dict().values())
