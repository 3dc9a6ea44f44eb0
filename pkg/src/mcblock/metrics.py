"""Evaluation metrics: Brier score, predictive entropy, AP/mAP, and NMS.

All functions here are pure and compute in float64.  Detections are plain
tuples ``(class_id, confidence, (x, y, w, h))`` with center-format boxes in
normalized image coordinates; ground truths are ``(class_id, (x, y, w, h))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ReportError


def shannon_entropy(probs) -> float:
    """Entropy in nats with the 0*log(0) = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def brier(probs, labels) -> float:
    """Mean squared error between predicted distributions and one-hot labels.

    ``probs`` is an (N, C) array-like of simplex rows, ``labels`` a length-N
    list of class ids.  Ranges over [0, 2]; 2 means a one-hot prediction on a
    wrong class.
    """
    p = np.asarray(probs, dtype=np.float64)
    labels = list(labels)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[0] != len(labels):
        raise ContractError("brier needs N > 0 prediction rows matching N labels")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("brier rows must sum to 1")
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def mean_entropy(dists) -> float:
    """Arithmetic mean of per-row Shannon entropies (nats)."""
    rows = list(dists)
    if not rows:
        raise ContractError("mean_entropy needs at least one distribution")
    return float(np.mean([shannon_entropy(r) for r in rows]))


def iou_xywh(a, b) -> float:
    """IoU of two center-format boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def _det_sort_key(det):
    # descending confidence, then lexicographic box for deterministic ties
    return (-det[1], det[2])


def nms(dets, iou_thresh: float, class_aware: bool = True):
    """Greedy suppression of overlapping lower-confidence boxes.

    ``class_aware`` restricts suppression to same-class pairs; the detection
    pipeline uses class-agnostic suppression (one object, one box).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError("nms iou_thresh must lie in (0, 1)")
    kept = []
    for det in sorted(dets, key=_det_sort_key):
        cls, box = det[0], det[2]
        if any(
            (not class_aware or k[0] == cls) and iou_xywh(k[2], box) >= iou_thresh
            for k in kept
        ):
            continue
        kept.append(det)
    return kept


def average_precision(dets_by_image, gts_by_image, iou_thresh: float):
    """Per-class AP and mAP at one IoU threshold.

    Matching is greedy in descending confidence, one detection per ground
    truth, requiring equal class and IoU >= iou_thresh.  AP integrates the
    all-points precision envelope over recall.  mAP averages over classes
    with at least one ground truth.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError("iou_thresh must lie in (0, 1)")
    n_gt = {}
    for gts in gts_by_image:
        for cls, _ in gts:
            n_gt[cls] = n_gt.get(cls, 0) + 1
    if not n_gt:
        raise ContractError("average_precision is undefined without ground truth")

    flat = [
        (img, det)
        for img, dets in enumerate(dets_by_image)
        for det in dets
    ]
    flat.sort(key=lambda x: _det_sort_key(x[1]))
    matched = [set() for _ in gts_by_image]
    per_class = {}
    for cls in n_gt:
        tp, fp = [], []
        for img, (dcls, _, box) in flat:
            if dcls != cls:
                continue
            best_iou, best_j = 0.0, -1
            for j, (gcls, gbox) in enumerate(gts_by_image[img]):
                if gcls != cls or j in matched[img]:
                    continue
                iou = iou_xywh(box, gbox)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                matched[img].add(best_j)
                tp.append(1.0)
                fp.append(0.0)
            else:
                tp.append(0.0)
                fp.append(1.0)
        if not tp:
            per_class[cls] = 0.0
            continue
        tp, fp = np.cumsum(tp), np.cumsum(fp)
        recall = tp / n_gt[cls]
        precision = tp / (tp + fp)
        # all-points interpolation: integrate the running max from the right
        mrec = np.concatenate(([0.0], recall, [recall[-1]]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.where(mrec[1:] != mrec[:-1])[0]
        per_class[cls] = float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())
    map_value = float(np.mean([per_class[c] for c in n_gt]))
    return per_class, map_value


def detection_brier(det_entries_by_image, gts_by_image, iou_thresh: float, n_classes: int):
    """Brier score over detections with an appended background class.

    ``det_entries`` are ``(class_id, confidence, box, class_probs)``.  Each
    detection is matched to ground truth exactly as in AP (descending
    confidence, equal class, IoU >= iou_thresh, one per GT); matched
    detections are scored against their GT class and unmatched ones against
    the background class ``n_classes``.  Returns None with zero detections.
    """
    rows, labels = [], []
    for dets, gts in zip(det_entries_by_image, gts_by_image):
        matched = set()
        for cls, _, box, probs in sorted(dets, key=_det_sort_key):
            best_iou, best_j = 0.0, -1
            for j, (gcls, gbox) in enumerate(gts):
                if gcls != cls or j in matched:
                    continue
                iou = iou_xywh(box, gbox)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            label = n_classes
            if best_j >= 0 and best_iou >= iou_thresh:
                matched.add(best_j)
                label = cls
            rows.append(np.concatenate([np.asarray(probs, np.float64), [0.0]]))
            labels.append(label)
    if not rows:
        return None
    return brier(rows, labels)


# -- report ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    map_50: float
    mean_entropy: float
    brier: float
    per_class_ap: dict
    n_images: int
    config: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "map_50": self.map_50,
            "brier": self.brier,
            "mean_entropy": self.mean_entropy,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "n_images": self.n_images,
            "config": self.config,
        }
        doc.update(self.extra)
        return doc


def _round_sig(x, sig=6):
    if isinstance(x, bool) or not isinstance(x, float):
        return x
    if x != x or x in (float("inf"), float("-inf")):
        raise ContractError("metrics must be finite")
    return float(f"{x:.{sig}g}")


def round_floats(obj, sig=6):
    """Recursively round floats to ``sig`` significant digits for emission."""
    if isinstance(obj, dict):
        return {k: round_floats(v, sig) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, sig) for v in obj]
    return _round_sig(obj, sig)


def dump_report(doc: dict) -> str:
    """Serialize a report dict as UTF-8 JSON with 6-significant-digit floats."""
    return json.dumps(round_floats(doc), indent=2, sort_keys=True) + "\n"


def load_report(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"{path}: unreadable report ({e})") from e
    if not isinstance(doc, dict):
        raise ReportError(f"{path}: report must be a JSON object")
    return doc
