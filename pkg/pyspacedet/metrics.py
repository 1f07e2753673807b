'''
pyspacedet/metrics.py

Detection metrics (box IoU, ground-truth matching, precision/recall sweeps,
average precision at IoU thresholds) and segmentation metrics (confusion
matrix, per-class IoU, mIoU).
'''

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

logger = logging.getLogger(__name__)

MATCH_RULES = ("closest_center", "max_iou")
INTERPOLATIONS = ("points_101", "all_points")
REC_THRESHOLDS = np.linspace(0.0, 1.0, 101)

# -----------------------------------------------------------------------------


class MetricsError(ValueError):
    """Raised when a metric is undefined for its inputs."""
    pass


def check_bbox(bbox):
    bbox = tuple(float(v) for v in bbox)
    if len(bbox) != 4 or not (bbox[0] < bbox[2] and bbox[1] < bbox[3]):
        raise ValueError(f"malformed bbox {bbox}, need x_min < x_max and y_min < y_max")
    return bbox


@dataclass
class Detection:
    image_id: str
    class_id: int
    bbox: tuple
    score: float = 1.0
    frame_index: int = 0

    def __post_init__(self):
        self.bbox = tuple(self.bbox)
        check_bbox(self.bbox)
        self.class_id = int(self.class_id)
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def center(self):
        return box_center(self.bbox)


@dataclass
class PRCurve:
    '''
    One point per detection in descending-score order: cumulative TP/FP
    counts, recall and precision at that cut. n_gt is the number of
    ground-truth objects the sweep was scored against.
    '''
    recall: np.ndarray
    precision: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    scores: np.ndarray
    n_gt: int

    @property
    def fn(self):
        return self.n_gt - self.tp

    @property
    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def __len__(self):
        return len(self.recall)


@dataclass
class SegSample:
    pred: np.ndarray
    gt: np.ndarray
    class_names: List[str] = field(default_factory=lambda: ["background", "spacecraft"])

# -----------------------------------------------------------------------------
# boxes


def box_center(bbox):
    return ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0)


def box_area(bbox):
    return max(0.0, bbox[2] - bbox[0]) * max(0.0, bbox[3] - bbox[1])


def iou_box(a, b):
    '''
    Intersection over union of two (x_min, y_min, x_max, y_max) boxes with
    continuous areas.
    '''
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union)


def match_to_gt(dets, gt, iou_min=0.5, rule="closest_center"):
    '''
    Pick the detection for a single ground-truth box among those with IoU
    strictly above iou_min: the one with the closest center
    (closest_center) or the highest IoU (max_iou). Ties go to the earlier
    detection. Returns None when nothing qualifies.
    '''
    if rule not in MATCH_RULES:
        raise ValueError(f"unknown match rule {rule}, expected one of {MATCH_RULES}")
    gt_box = getattr(gt, "bbox", gt)
    gcx, gcy = box_center(gt_box)
    best, best_key = None, None
    for det in dets:
        iou = iou_box(det.bbox, gt_box)
        if not iou > iou_min:
            continue
        if rule == "closest_center":
            cx, cy = box_center(det.bbox)
            key = np.hypot(cx - gcx, cy - gcy)
        else:
            key = -iou
        if best_key is None or key < best_key:
            best, best_key = det, key
    return best


def zero_shot_filter(dets, gts, iou_min=0.5, rule="closest_center"):
    '''
    Zero-shot evaluation protocol: for every ground-truth object keep only
    the detection match_to_gt picks in the same image, discarding the rest
    as already-filtered background. Returns the kept detections in input
    order.
    '''
    by_image = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)
    kept = set()
    for gt in gts:
        pick = match_to_gt(by_image.get(gt.image_id, []), gt, iou_min, rule)
        if pick is not None:
            kept.add(id(pick))
    out = [d for d in dets if id(d) in kept]
    logger.info("[metrics] zero-shot filter (%s, iou > %.2f) kept %d of %d detections",
                rule, iou_min, len(out), len(dets))
    return out

# -----------------------------------------------------------------------------
# precision / recall


def pr_curve(dets, gts, iou_thresh=0.5):
    '''
    Sweep detections by descending score (stable for ties). Each detection
    is matched greedily to the unmatched ground truth of the same image and
    class with the highest IoU, provided that IoU >= iou_thresh.
    '''
    order = np.argsort(-np.array([d.score for d in dets], dtype=float), kind="stable")
    gt_index = {}
    for j, gt in enumerate(gts):
        gt_index.setdefault((gt.image_id, gt.class_id), []).append(j)
    matched = np.zeros(len(gts), dtype=bool)
    is_tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        best_j, best_iou = -1, -1.0
        for j in gt_index.get((det.image_id, det.class_id), []):
            if matched[j]:
                continue
            iou = iou_box(det.bbox, gts[j].bbox)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            is_tp[rank] = True
    tp = np.cumsum(is_tp).astype(np.int64)
    fp = np.cumsum(~is_tp).astype(np.int64)
    n_gt = len(gts)
    recall = tp / float(n_gt) if n_gt else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1).astype(float)
    scores = np.array([dets[i].score for i in order], dtype=float)
    return PRCurve(recall, precision, tp, fp, scores, n_gt)


def precision_envelope(precision):
    env = np.array(precision, dtype=float)
    for i in range(len(env) - 1, 0, -1):
        env[i - 1] = max(env[i - 1], env[i])
    return env


def average_precision(curve, interpolation="points_101"):
    '''
    Area under the monotone precision envelope.

    all_points sums envelope precision over every recall increment;
    points_101 averages the envelope sampled at recall 0, 0.01, ..., 1.
    '''
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation}, expected one of {INTERPOLATIONS}")
    if curve.n_gt == 0:
        raise MetricsError("average precision is undefined without ground truth")
    if len(curve) == 0:
        return 0.0
    if interpolation == "all_points":
        mrec = np.concatenate(([0.0], curve.recall, [1.0]))
        mpre = precision_envelope(np.concatenate(([0.0], curve.precision, [0.0])))
        i = np.where(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))
    env = precision_envelope(curve.precision)
    inds = np.searchsorted(curve.recall, REC_THRESHOLDS, side="left")
    q = np.array([env[k] if k < len(env) else 0.0 for k in inds])
    return float(np.mean(q))


def _ap_key(thresh):
    return f"AP{int(round(thresh * 100))}"


def evaluate_detections(dets, gts, iou_thresholds=(0.5, 0.75),
                        interpolation="points_101", class_agnostic=False):
    '''
    AP per IoU threshold, per class and averaged over the classes that have
    ground truth. Each threshold is scored independently.

    Returns a report dict:
        {"kind": "detection", "interpolation": ..., "n_gt": ..., "n_det": ...,
         "thresholds": {"AP50": {"iou": 0.5, "mean": ..., "per_class": {cls: ap}}}}
    '''
    if class_agnostic:
        dets = [Detection(d.image_id, 0, d.bbox, d.score, d.frame_index) for d in dets]
        gts = [Detection(g.image_id, 0, g.bbox, 1.0) for g in gts]
    if not gts:
        raise MetricsError("cannot evaluate detections without ground truth")
    classes = sorted({g.class_id for g in gts})
    report = {"kind": "detection", "interpolation": interpolation,
              "n_gt": len(gts), "n_det": len(dets), "thresholds": {}}
    for thresh in iou_thresholds:
        per_class = {}
        for cls in classes:
            curve = pr_curve([d for d in dets if d.class_id == cls],
                             [g for g in gts if g.class_id == cls], thresh)
            per_class[cls] = average_precision(curve, interpolation)
        report["thresholds"][_ap_key(thresh)] = {
            "iou": float(thresh), "per_class": per_class,
            "mean": float(np.mean(list(per_class.values())))}
        logger.info("[metrics] %s = %.4f over %d classes",
                    _ap_key(thresh), report["thresholds"][_ap_key(thresh)]["mean"], len(classes))
    return report

# -----------------------------------------------------------------------------
# segmentation


def _check_sample(sample):
    pred = np.asarray(sample.pred)
    gt = np.asarray(sample.gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = len(sample.class_names)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise MetricsError(f"{name} holds class ids outside [0, {n})")
    return pred.astype(np.int64).ravel(), gt.astype(np.int64).ravel(), n


def confusion_matrix(sample):
    '''
    C x C counts; entry (i, j) is the number of pixels of ground-truth class
    i predicted as class j.
    '''
    pred, gt, n = _check_sample(sample)
    count = np.bincount(n * gt + pred, minlength=n * n)
    return count.reshape(n, n)


def iou_from_confusion(cm, class_names, ignore_absent=True):
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    present = union > 0
    if not present.any():
        raise MetricsError("no class is present in prediction or ground truth")
    per_class, included = {}, []
    for c, name in enumerate(class_names):
        if present[c]:
            per_class[name] = float(inter[c] / union[c])
            included.append(per_class[name])
        elif ignore_absent:
            per_class[name] = None
        else:
            per_class[name] = 0.0
            included.append(0.0)
    return {"kind": "segmentation", "per_class": per_class,
            "mean": float(np.mean(included))}


def miou(sample, ignore_absent=True):
    '''
    Per-class IoU and their mean. Classes absent from both maps are left
    out of the mean (reported as None) when ignore_absent, else they count
    as 0.
    '''
    return iou_from_confusion(confusion_matrix(sample), sample.class_names, ignore_absent)


class SegAccumulator:
    '''
    Dataset-level segmentation scores from global per-class intersection and
    union. Accumulators over disjoint image sets merge by adding confusion
    matrices.
    '''

    def __init__(self, class_names):
        self.class_names = list(class_names)
        self.confusion = np.zeros((len(self.class_names),) * 2, dtype=np.int64)
        self.n_images = 0

    def update(self, pred, gt):
        self.confusion += confusion_matrix(SegSample(pred, gt, self.class_names))
        self.n_images += 1
        return self

    def merge(self, other):
        if other.class_names != self.class_names:
            raise MetricsError("cannot merge accumulators over different classes")
        out = SegAccumulator(self.class_names)
        out.confusion = self.confusion + other.confusion
        out.n_images = self.n_images + other.n_images
        return out

    def pixel_accuracy(self):
        total = self.confusion.sum()
        if total == 0:
            raise MetricsError("no pixels accumulated")
        return float(np.diag(self.confusion).sum() / total)

    def result(self, ignore_absent=True):
        report = iou_from_confusion(self.confusion, self.class_names, ignore_absent)
        report["pixel_accuracy"] = self.pixel_accuracy()
        report["n_images"] = self.n_images
        return report


def instances_to_semantic(masks, class_ids, scores, shape, background=0):
    '''
    Paint instance masks into one class-index map. Lower-scoring instances
    are painted first so overlaps go to the higher score.
    '''
    out = np.full(shape, background, dtype=np.int64)
    order = np.argsort(np.asarray(scores, dtype=float), kind="stable")
    for i in order:
        mask = np.asarray(masks[i]).astype(bool)
        if mask.shape != tuple(shape):
            raise MetricsError(f"instance mask {mask.shape} does not match {tuple(shape)}")
        out[mask] = int(class_ids[i])
    return out

# -----------------------------------------------------------------------------
# reports


def report_table(report):
    '''
    Flatten a detection or segmentation report to a pandas DataFrame with
    one row per class and a mean row.
    '''
    import pandas as pd
    rows = []
    if report.get("kind") == "detection":
        for key, entry in report["thresholds"].items():
            for cls, ap in entry["per_class"].items():
                rows.append({"metric": key, "class": str(cls), "value": ap})
            rows.append({"metric": key, "class": "mean", "value": entry["mean"]})
    else:
        for name, iou in report["per_class"].items():
            rows.append({"metric": "IoU", "class": name, "value": iou})
        rows.append({"metric": "mIoU", "class": "mean", "value": report["mean"]})
    return pd.DataFrame(rows, columns=["metric", "class", "value"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report_json(report, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_report_csv(report, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    report_table(report).to_csv(path, index=False)
    return path
