import os
import tempfile
import unittest

import numpy as np

from pyspacedet import metrics
from pyspacedet.datasetio import Annotation
from pyspacedet.metrics import Detection, SegSample

# -----------------------------------------------------------------------------
# helpers


def brute_force_ap(dets, gts, thresh):
    '''
    Score-cut enumeration: for every cut k, recall and precision of the top k
    detections; each TP contributes 1/n_gt times the best precision at or
    after its cut.
    '''
    ranked = sorted(dets, key=lambda d: -d.score)
    used = set()
    flags = []
    for det in ranked:
        cands = [(metrics.iou_box(det.bbox, g.bbox), j) for j, g in enumerate(gts) if j not in used]
        best = max(cands, default=(-1.0, -1))
        if best[1] >= 0 and best[0] >= thresh:
            used.add(best[1])
            flags.append(True)
        else:
            flags.append(False)
    precisions = [sum(flags[:k + 1]) / (k + 1) for k in range(len(flags))]
    ap = 0.0
    for k, flag in enumerate(flags):
        if flag:
            ap += max(precisions[k:]) / len(gts)
    return ap


def random_instance(rng):
    n_gt = int(rng.integers(1, 6))
    gts = [Annotation(0, (20 * j, 0, 20 * j + 10, 10), image_id="im") for j in range(n_gt)]
    dets = []
    for _ in range(int(rng.integers(0, 11))):
        j = int(rng.integers(0, n_gt + 1))
        dx, dy = (int(v) for v in rng.integers(-6, 7, size=2))
        w, h = (int(v) for v in rng.integers(4, 14, size=2))
        dets.append(Detection("im", 0, (20 * j + dx, dy, 20 * j + dx + w, dy + h),
                              float(rng.random())))
    return dets, gts

# -----------------------------------------------------------------------------
# unit tests


class Test_boxes(unittest.TestCase):

    def test_iou(self):
        self.assertEqual(metrics.iou_box((0, 0, 1, 1), (0, 0, 1, 1)), 1.0)
        self.assertEqual(metrics.iou_box((0, 0, 1, 1), (2, 2, 3, 3)), 0.0)
        self.assertAlmostEqual(metrics.iou_box((0, 0, 1, 1), (0.5, 0, 1.5, 1)), 1 / 3)

    def test_detection_validation(self):
        with self.assertRaises(ValueError):
            Detection("a", 0, (5, 0, 1, 1))
        with self.assertRaises(ValueError):
            Detection("a", 0, (0, 0, 1, 1), score=1.5)


class Test_match_to_gt(unittest.TestCase):

    def setUp(self):
        self.gt = (0, 0, 10, 10)
        self.d1 = Detection("a", 0, (1, 1, 11, 11), 0.3)
        self.d2 = Detection("a", 0, (8, 8, 18, 18), 0.9)

    def test_fixture(self):
        self.assertAlmostEqual(metrics.iou_box(self.d1.bbox, self.gt), 0.6807, places=4)
        self.assertAlmostEqual(metrics.iou_box(self.d2.bbox, self.gt), 0.0204, places=4)
        for rule in metrics.MATCH_RULES:
            with self.subTest(rule=rule):
                self.assertIs(metrics.match_to_gt([self.d1, self.d2], self.gt, rule=rule), self.d1)
                self.assertIs(metrics.match_to_gt([self.d2, self.d1], self.gt, rule=rule), self.d1)

    def test_none(self):
        self.assertIsNone(metrics.match_to_gt([], self.gt))
        self.assertIsNone(metrics.match_to_gt([self.d2], self.gt))

    def test_tie_break(self):
        right = Detection("a", 0, (1, 0, 11, 10))
        left = Detection("a", 0, (-1, 0, 9, 10))
        self.assertIs(metrics.match_to_gt([right, left], self.gt), right)
        self.assertIs(metrics.match_to_gt([left, right], self.gt), left)

    def test_zero_shot_filter(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="a"),
               Annotation(0, (50, 50, 60, 60), image_id="b")]
        noise = Detection("a", 0, (30, 30, 40, 40), 0.95)
        other_image = Detection("b", 0, (1, 1, 11, 11), 0.9)
        dets = [noise, self.d1, self.d2, other_image]
        kept = metrics.zero_shot_filter(dets, gts)
        self.assertEqual(kept, [self.d1])


class Test_average_precision(unittest.TestCase):

    def test_perfect(self):
        gts = [Annotation(0, (20 * j, 0, 20 * j + 10, 10), image_id="im") for j in range(3)]
        dets = [Detection("im", 0, g.bbox, 0.9 - 0.1 * j) for j, g in enumerate(gts)]
        curve = metrics.pr_curve(dets, gts, 0.5)
        self.assertEqual(curve.points[-1], (1.0, 1.0))
        for interp in metrics.INTERPOLATIONS:
            self.assertAlmostEqual(metrics.average_precision(curve, interp), 1.0)

    def test_one_gt(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="im")]
        dets = [Detection("im", 0, (0, 0, 8, 10), 0.9), Detection("im", 0, (20, 20, 30, 30), 0.5)]
        curve = metrics.pr_curve(dets, gts, 0.5)
        self.assertEqual(curve.points, [(1.0, 1.0), (1.0, 0.5)])

    def test_two_gt(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="im"),
               Annotation(0, (20, 0, 30, 10), image_id="im")]
        dets = [Detection("im", 0, (0, 0, 10, 10), 0.9),
                Detection("im", 0, (50, 50, 60, 60), 0.8),
                Detection("im", 0, (20, 0, 30, 10), 0.7)]
        curve = metrics.pr_curve(dets, gts, 0.5)
        expected = [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
        for (r, p), (er, ep) in zip(curve.points, expected):
            self.assertAlmostEqual(r, er)
            self.assertAlmostEqual(p, ep)
        self.assertEqual(curve.fn.tolist(), [1, 1, 0])
        self.assertAlmostEqual(metrics.average_precision(curve, "all_points"), 0.83333333333, places=9)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(1000):
            dets, gts = random_instance(rng)
            thresh = 0.5 if trial % 2 else 0.75
            ap = metrics.average_precision(metrics.pr_curve(dets, gts, thresh), "all_points")
            with self.subTest(trial=trial):
                self.assertAlmostEqual(ap, brute_force_ap(dets, gts, thresh), delta=1e-9)

    def test_monotone_score_transform(self):
        rng = np.random.default_rng(31)
        transforms = [np.sqrt, lambda s: s ** 2, lambda s: 0.1 + 0.8 * s]
        for trial in range(200):
            dets, gts = random_instance(rng)
            base = {interp: metrics.average_precision(metrics.pr_curve(dets, gts, 0.5), interp)
                    for interp in metrics.INTERPOLATIONS}
            for k, f in enumerate(transforms):
                moved = [Detection(d.image_id, d.class_id, d.bbox, float(f(d.score))) for d in dets]
                for interp in metrics.INTERPOLATIONS:
                    with self.subTest(trial=trial, transform=k, interpolation=interp):
                        ap = metrics.average_precision(metrics.pr_curve(moved, gts, 0.5), interp)
                        self.assertAlmostEqual(ap, base[interp], delta=1e-12)

    def test_no_ground_truth(self):
        curve = metrics.pr_curve([Detection("im", 0, (0, 0, 1, 1))], [], 0.5)
        with self.assertRaises(metrics.MetricsError):
            metrics.average_precision(curve)

    def test_no_detections(self):
        curve = metrics.pr_curve([], [Annotation(0, (0, 0, 1, 1), image_id="im")], 0.5)
        self.assertEqual(metrics.average_precision(curve), 0.0)

    def test_evaluate(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="a"),
               Annotation(1, (0, 0, 10, 10), image_id="b")]
        dets = [Detection("a", 0, (0, 0, 10, 10), 0.9),
                Detection("b", 1, (0, 0, 10, 8), 0.8)]
        report = metrics.evaluate_detections(dets, gts, (0.5, 0.75))
        self.assertEqual(sorted(report["thresholds"]), ["AP50", "AP75"])
        self.assertAlmostEqual(report["thresholds"]["AP50"]["mean"], 1.0)
        self.assertAlmostEqual(report["thresholds"]["AP75"]["mean"], 1.0)
        report = metrics.evaluate_detections(dets, gts, (0.85,))
        self.assertEqual(report["thresholds"]["AP85"]["per_class"], {0: 1.0, 1: 0.0})

    def test_class_agnostic(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="a")]
        dets = [Detection("a", 1, (0, 0, 10, 10), 0.9)]
        self.assertEqual(metrics.evaluate_detections(dets, gts, (0.5,))["thresholds"]["AP50"]["mean"], 0.0)
        report = metrics.evaluate_detections(dets, gts, (0.5,), class_agnostic=True)
        self.assertEqual(report["thresholds"]["AP50"]["mean"], 1.0)


class Test_segmentation(unittest.TestCase):

    def test_identical(self):
        gt = np.array([[0, 1], [1, 1]])
        report = metrics.miou(SegSample(gt, gt))
        self.assertEqual(report["per_class"], {"background": 1.0, "spacecraft": 1.0})
        self.assertEqual(report["mean"], 1.0)
        cm = metrics.confusion_matrix(SegSample(gt, gt))
        self.assertTrue(np.array_equal(cm, np.diag([1, 3])))

    def test_quadrant_fixture(self):
        sample = SegSample(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), ["A", "B"])
        report = metrics.miou(sample)
        self.assertAlmostEqual(report["per_class"]["A"], 1 / 2, delta=1e-12)
        self.assertAlmostEqual(report["per_class"]["B"], 2 / 3, delta=1e-12)
        self.assertAlmostEqual(report["mean"], 7 / 12, delta=1e-12)
        cm = metrics.confusion_matrix(sample)
        # rows are ground truth, columns prediction
        self.assertEqual(cm.tolist(), [[1, 0], [1, 2]])
        self.assertEqual(cm.T.tolist(), [[1, 1], [0, 2]])

    def test_total_mismatch(self):
        report = metrics.miou(SegSample(np.zeros((3, 3), int), np.ones((3, 3), int), ["A", "B"]))
        self.assertEqual(report["per_class"], {"A": 0.0, "B": 0.0})
        self.assertEqual(report["mean"], 0.0)

    def test_empty(self):
        cm = metrics.confusion_matrix(SegSample(np.zeros(0, int), np.zeros(0, int), ["A", "B"]))
        self.assertEqual(cm.tolist(), [[0, 0], [0, 0]])
        with self.assertRaises(metrics.MetricsError):
            metrics.iou_from_confusion(cm, ["A", "B"])

    def test_absent_class(self):
        sample = SegSample(np.array([[0, 1]]), np.array([[0, 1]]), ["bg", "sc", "panel"])
        self.assertIsNone(metrics.miou(sample)["per_class"]["panel"])
        self.assertEqual(metrics.miou(sample)["mean"], 1.0)
        counted = metrics.miou(sample, ignore_absent=False)
        self.assertAlmostEqual(counted["mean"], 2 / 3)

    def test_errors(self):
        with self.assertRaises(metrics.MetricsError):
            metrics.miou(SegSample(np.zeros((2, 2), int), np.zeros((2, 3), int)))
        with self.assertRaises(metrics.MetricsError):
            metrics.miou(SegSample(np.full((2, 2), 2), np.zeros((2, 2), int)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        names = ["a", "b", "c"]
        for trial in range(100):
            pred = rng.integers(0, 3, size=(6, 5))
            gt = rng.integers(0, 3, size=(6, 5))
            perm = rng.permutation(3)
            permuted_names = [None] * 3
            for c in range(3):
                permuted_names[perm[c]] = names[c]
            a = metrics.miou(SegSample(pred, gt, names))
            b = metrics.miou(SegSample(perm[pred], perm[gt], permuted_names))
            with self.subTest(trial=trial):
                for name in names:
                    self.assertAlmostEqual(a["per_class"][name], b["per_class"][name], delta=1e-12)
                self.assertAlmostEqual(a["mean"], b["mean"], delta=1e-12)

    def test_accumulator(self):
        rng = np.random.default_rng(3)
        maps = [(rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))) for _ in range(6)]
        left, right, whole = (metrics.SegAccumulator(["bg", "sc"]) for _ in range(3))
        for k, (pred, gt) in enumerate(maps):
            (left if k < 3 else right).update(pred, gt)
            whole.update(pred, gt)
        merged = left.merge(right)
        self.assertTrue(np.array_equal(merged.confusion, whole.confusion))
        self.assertEqual(merged.result(), whole.result())
        self.assertEqual(whole.result()["n_images"], 6)
        self.assertTrue(0.0 <= whole.pixel_accuracy() <= 1.0)

    def test_instances_to_semantic(self):
        a = np.zeros((3, 3), bool)
        a[0:2, 0:2] = True
        b = np.zeros((3, 3), bool)
        b[1:3, 1:3] = True
        out = metrics.instances_to_semantic([a, b], [1, 2], [0.9, 0.4], (3, 3))
        self.assertEqual(out[1, 1], 1)
        self.assertEqual(out[2, 2], 2)
        self.assertEqual(out[0, 2], 0)


class Test_reports(unittest.TestCase):

    def test_write(self):
        gts = [Annotation(0, (0, 0, 10, 10), image_id="a")]
        report = metrics.evaluate_detections([Detection("a", 0, (0, 0, 10, 10), 0.9)], gts)
        table = metrics.report_table(report)
        self.assertEqual(list(table.columns), ["metric", "class", "value"])
        self.assertEqual(len(table), 4)
        with tempfile.TemporaryDirectory() as tmp:
            metrics.write_report_json(report, os.path.join(tmp, "r.json"))
            metrics.write_report_csv(report, os.path.join(tmp, "r.csv"))
            with open(os.path.join(tmp, "r.csv")) as fh:
                self.assertEqual(fh.readline().strip(), "metric,class,value")
