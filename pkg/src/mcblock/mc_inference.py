"""Monte-Carlo predictive inference over sampled mask architectures.

``S`` stochastic forward passes run with the feature mask active; the
predictive distribution is the plain average of the per-sample outputs.
For detection, the per-sample detections are merged by greedy IoU consensus
clustering: the spread of a cluster's boxes across samples is the epistemic
box variance, and the fraction of samples that saw the object at all is its
support.  ``method="none"`` collapses everything to one deterministic pass.

Sample ``i`` always draws from stream ``rng.split(i)``, so the passes can run
in parallel (MCBLOCK_THREADS) with results identical to sequential execution.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .metrics import iou_xywh, nms, shannon_entropy
from .model import Detection, classifier_forward, decode, detector_forward
from .tensor import Tensor

SAMPLE_NMS_IOU = 0.45

_METHODS = ("dropblock", "dropout", "none")


@dataclass(frozen=True)
class McConfig:
    samples: int = 30
    merge_iou: float = 0.5
    min_support_frac: float = 0.3
    method: str = "dropblock"
    dropout_p: float = 0.5

    def validate(self) -> None:
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if not 0.0 < self.merge_iou < 1.0:
            raise ConfigError("merge_iou must lie in (0, 1)")
        if not 0.0 <= self.min_support_frac <= 1.0:
            raise ConfigError("min_support_frac must lie in [0, 1]")
        if self.method not in _METHODS:
            raise ConfigError(f"unknown method {self.method!r}")


def _thread_budget() -> int:
    try:
        return max(1, int(os.environ.get("MCBLOCK_THREADS", "1")))
    except ValueError:
        return 1


def _run_samples(fn, n: int):
    """Evaluate fn(i) for i in range(n), optionally threaded, order preserved."""
    workers = min(_thread_budget(), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def mc_classify(image: Tensor, params, cfg: McConfig, rng):
    """(mean class probabilities, entropy of that mean distribution)."""
    cfg.validate()
    if cfg.method == "none":
        logits = classifier_forward(image, params, "disabled", None).data[0]
        probs = _softmax64(logits)
        return probs, shannon_entropy(probs)

    def one(i):
        logits = classifier_forward(
            image, params, "inference", rng.split(i), cfg.method, cfg.dropout_p
        ).data[0]
        return _softmax64(logits)

    probs = _run_samples(one, cfg.samples)
    mean = np.sum(probs, axis=0) / cfg.samples
    return mean, shannon_entropy(mean)


def _softmax64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def detection_entropy(det: Detection) -> float:
    """Shannon entropy (nats) of the detection's class distribution."""
    return shannon_entropy(det.class_probs)


def _sample_detections(image, params, cfg, rng, sample_gate, nms_iou, i):
    raw = detector_forward(
        image, params, "inference", rng.split(i), cfg.method, cfg.dropout_p
    )
    return _nms_detections(decode(raw, params.hyper["anchors"], sample_gate), nms_iou)


def _nms_detections(dets, iou_thresh):
    order = {id(d): d for d in dets}
    kept = nms(
        [(int(np.argmax(d.class_probs)), d.confidence, d.box) + (id(d),) for d in dets],
        iou_thresh,
        class_aware=False,
    )
    return [order[entry[3]] for entry in kept]


def _det_key(det: Detection):
    return (-det.objectness, det.box)


def merge_detections(per_sample, cfg: McConfig):
    """IoU-greedy consensus clustering of per-sample detection lists.

    Clusters grow greedily from the highest-objectness unclaimed detection,
    absorbing every unclaimed detection (from any sample) with IoU >=
    merge_iou to the leader.  Each contributing sample then casts exactly
    one vote, its highest-objectness member, so the statistics measure
    spread ACROSS samples: box, sigma, and class probabilities are means
    over the per-sample votes, epistemic_box_var is the per-coordinate
    population variance of the voted boxes, and objectness is the mean over
    ALL samples with absent samples voting zero.  Clusters seen in fewer
    than min_support_frac * S samples are dropped.  Output is sorted by
    descending objectness, ties broken by box coordinates.
    """
    n_samples = len(per_sample)
    pool = [
        (det, s) for s, dets in enumerate(per_sample) for det in dets
    ]
    pool.sort(key=lambda e: _det_key(e[0]))
    if not pool:
        return []
    boxes_all = np.array([d.box for d, _ in pool], dtype=np.float64)
    claimed = np.zeros(len(pool), dtype=bool)
    merged = []
    for lead in range(len(pool)):
        if claimed[lead]:
            continue
        members_idx = np.nonzero(
            ~claimed & (_iou_vec(boxes_all[lead], boxes_all) >= cfg.merge_iou)
        )[0]
        claimed[members_idx] = True
        votes: dict[int, Detection] = {}
        for j in members_idx:
            det, s = pool[j]
            if s not in votes:  # pool is objectness-sorted: first hit is best
                votes[s] = det
        support = len(votes)
        if support < cfg.min_support_frac * n_samples - 1e-9:
            continue
        reps = list(votes.values())
        boxes = np.array([d.box for d in reps], dtype=np.float64)
        sigmas = np.array([d.sigma for d in reps], dtype=np.float64)
        probs = np.array([d.class_probs for d in reps], dtype=np.float64)
        merged.append(
            Detection(
                box=tuple(boxes.sum(axis=0) / support),
                sigma=tuple(sigmas.sum(axis=0) / support),
                class_probs=probs.sum(axis=0) / support,
                objectness=float(sum(d.objectness for d in reps) / n_samples),
                support=support,
                epistemic_box_var=tuple(boxes.var(axis=0)),
            )
        )
    return sorted(merged, key=_det_key)


def _iou_vec(box, boxes):
    x1 = np.maximum(box[0] - box[2] / 2, boxes[:, 0] - boxes[:, 2] / 2)
    y1 = np.maximum(box[1] - box[3] / 2, boxes[:, 1] - boxes[:, 3] / 2)
    x2 = np.minimum(box[0] + box[2] / 2, boxes[:, 0] + boxes[:, 2] / 2)
    y2 = np.minimum(box[1] + box[3] / 2, boxes[:, 1] + boxes[:, 3] / 2)
    inter = np.maximum(x2 - x1, 0.0) * np.maximum(y2 - y1, 0.0)
    union = box[2] * box[3] + boxes[:, 2] * boxes[:, 3] - inter
    return inter / union


def mc_detect(image: Tensor, params, cfg: McConfig, rng, conf_thresh: float = 0.25,
              nms_iou: float = SAMPLE_NMS_IOU):
    """Consensus detections across ``cfg.samples`` masked passes.

    Individual samples decode at half the confidence gate so that borderline
    detections still vote; the full ``conf_thresh`` then gates the merged
    consensus confidence (mean objectness times max mean class probability),
    alongside the support filter.  See ``merge_detections`` for the
    clustering contract.
    """
    cfg.validate()
    if cfg.method == "none":
        raw = detector_forward(image, params, "disabled", None)
        dets = _nms_detections(decode(raw, params.hyper["anchors"], conf_thresh), nms_iou)
        return sorted(dets, key=_det_key)

    per_sample = _run_samples(
        lambda i: _sample_detections(
            image, params, cfg, rng, 0.5 * conf_thresh, nms_iou, i
        ),
        cfg.samples,
    )
    merged = merge_detections(per_sample, cfg)
    return [d for d in merged if d.confidence >= conf_thresh]
