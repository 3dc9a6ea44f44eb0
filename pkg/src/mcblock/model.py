"""Toy one-stage grid detector and image classifier on the tensor engine.

The detector maps a 64x64x3 image through four 3x3 conv blocks (strides
2,2,2,1, leaky-relu 0.1) to an 8x8x64 feature map, applies the feature mask
there (the layer right before the prediction head), and predicts per anchor
and cell: 4 box means, 4 box log-sigmas, an objectness logit, and C class
logits.  Box means are cell-relative (x, y through a sigmoid) and log-space
(w, h against an anchor prior); sigmas go through softplus(raw) + 1e-4, which
keeps them positive for every finite raw value without any clamping.

The classifier shares the conv stack and mask site, then flattens into a
single dense head.

Weights persist in a versioned little-endian binary format ("MCBK"); see
``save_params`` for the exact byte layout.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .dropblock import (
    DropBlockConfig,
    apply_dropout,
    apply_mask,
    apply_mask_stack,
    sample_dropout_mask,
    sample_mask,
)
from .errors import ContractError, DimensionError, WeightsError
from .metrics import shannon_entropy
from .rng import Rng
from .tensor import (
    Tensor,
    bce_with_logits,
    bias_add,
    conv2d,
    dense,
    div,
    exp,
    leaky_relu,
    log,
    log_softmax,
    maximum,
    minimum,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    square,
    sub,
    tmean,
    tsum,
)

LEAKY_ALPHA = 0.1
SIGMA_FLOOR = 1e-4
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_STRIDES = (2, 2, 2, 1)

MAGIC = b"MCBK"
FORMAT_VERSION = 1


# -- domain types -----------------------------------------------------------------


@dataclass(frozen=True)
class GtBox:
    """One ground-truth object: class id and center-format normalized box."""

    cls: int
    x: float
    y: float
    w: float
    h: float

    def validate(self) -> None:
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ContractError(f"gt center outside [0,1]: ({self.x}, {self.y})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ContractError(f"gt size outside (0,1]: ({self.w}, {self.h})")

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class GaussianBox:
    """Box distribution: cell-relative/log-space means plus per-coordinate sigma."""

    mu_x: float
    mu_y: float
    mu_w: float
    mu_h: float
    sigma_x: float
    sigma_y: float
    sigma_w: float
    sigma_h: float

    def validate(self) -> None:
        if min(self.sigma_x, self.sigma_y, self.sigma_w, self.sigma_h) <= 0:
            raise ContractError("all sigmas must be positive")


@dataclass
class Detection:
    box: tuple  # (x, y, w, h) normalized, center format
    sigma: tuple  # aleatoric std per coordinate
    class_probs: np.ndarray  # float64 simplex [C]
    objectness: float
    support: int = 1
    epistemic_box_var: tuple = (0.0, 0.0, 0.0, 0.0)
    entropy: float = field(default=None)

    def __post_init__(self):
        if self.entropy is None:
            self.entropy = shannon_entropy(self.class_probs)

    @property
    def confidence(self) -> float:
        return float(self.objectness * float(np.max(self.class_probs)))


@dataclass
class ModelParams:
    arch: str  # "detector" | "classifier"
    hyper: dict
    tensors: dict  # name -> Tensor, insertion ordered

    def all_tensors(self):
        return list(self.tensors.values())

    def weight_tensors(self):
        return [t for n, t in self.tensors.items() if n.endswith(".weight")]


# -- construction -------------------------------------------------------------------


def detector_hyper(classes=3, dropblock_p=0.1, dropblock_block_size=3,
                   dropblock_per_channel=False) -> dict:
    return {
        "image_size": 64,
        "grid": 8,
        "classes": int(classes),
        "anchors": [[0.2, 0.2], [0.5, 0.5]],
        "channels": [16, 32, 64, 64],
        "dropblock_p": float(dropblock_p),
        "dropblock_block_size": int(dropblock_block_size),
        "dropblock_per_channel": bool(dropblock_per_channel),
    }


def classifier_hyper(classes=3, dropblock_p=0.1, dropblock_block_size=3,
                     dropblock_per_channel=False) -> dict:
    h = detector_hyper(classes, dropblock_p, dropblock_block_size, dropblock_per_channel)
    del h["anchors"]
    return h


def _conv_layers(hyper):
    chans = [3] + list(hyper["channels"])
    return [
        (f"conv{i + 1}", chans[i], chans[i + 1], _STRIDES[i])
        for i in range(len(hyper["channels"]))
    ]


def _init_conv(rng: Rng, name, cin, cout, k, tensors):
    fan_in = cin * k * k
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
    tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
    tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def init_detector_params(rng: Rng, hyper: dict | None = None) -> ModelParams:
    hyper = hyper or detector_hyper()
    tensors = {}
    for i, (name, cin, cout, _) in enumerate(_conv_layers(hyper)):
        _init_conv(rng.split(i), name, cin, cout, 3, tensors)
    classes = hyper["classes"]
    n_anchor = len(hyper["anchors"])
    head_out = n_anchor * (9 + classes)
    _init_conv(rng.split(10), "head", hyper["channels"][-1], head_out, 1, tensors)
    # start with low objectness so early training is dominated by real signal
    bias = tensors["head.bias"].data
    for a in range(n_anchor):
        bias[a * (9 + classes) + 8] = -2.0
    return ModelParams("detector", hyper, tensors)


def init_classifier_params(rng: Rng, hyper: dict | None = None) -> ModelParams:
    hyper = hyper or classifier_hyper()
    tensors = {}
    for i, (name, cin, cout, _) in enumerate(_conv_layers(hyper)):
        _init_conv(rng.split(i), name, cin, cout, 3, tensors)
    feat = hyper["channels"][-1] * hyper["grid"] ** 2
    classes = hyper["classes"]
    w = rng.split(10).normal(0.0, math.sqrt(2.0 / feat), size=(feat, classes))
    tensors["fc.weight"] = Tensor(w, requires_grad=True)
    tensors["fc.bias"] = Tensor(np.zeros(classes), requires_grad=True)
    return ModelParams("classifier", hyper, tensors)


# -- forward passes ------------------------------------------------------------------


def _backbone(x: Tensor, params: ModelParams) -> Tensor:
    for name, _, _, stride in _conv_layers(params.hyper):
        x = conv2d(x, params.tensors[f"{name}.weight"], stride=stride, padding=1)
        x = bias_add(x, params.tensors[f"{name}.bias"])
        x = leaky_relu(x, LEAKY_ALPHA)
    return x


def _apply_feature_drop(feat: Tensor, params: ModelParams, mode: str, rng,
                        method: str, dropout_p: float) -> Tensor:
    if mode == "disabled" or method == "none":
        return feat
    _, c, h, w = feat.shape
    if method == "dropblock":
        hyper = params.hyper
        cfg = DropBlockConfig(
            block_size=hyper["dropblock_block_size"],
            p=hyper["dropblock_p"],
            mode=mode,
            per_channel=hyper["dropblock_per_channel"],
        )
        if cfg.per_channel:
            masks = [sample_mask(h, w, cfg, rng.split(ci)) for ci in range(c)]
            return apply_mask_stack(feat, masks)
        return apply_mask(feat, sample_mask(h, w, cfg, rng))
    if method == "dropout":
        return apply_dropout(feat, sample_dropout_mask(c, dropout_p, rng))
    raise ContractError(f"unknown drop method {method!r}")


def _check_image(image: Tensor, hyper: dict) -> None:
    s = hyper["image_size"]
    if len(image.shape) != 4 or image.shape[1] != 3 or image.shape[2:] != (s, s):
        raise DimensionError(f"expected image [N,3,{s},{s}], got {image.shape}")


def detector_forward(image: Tensor, params: ModelParams, mode: str, rng,
                     method: str = "dropblock", dropout_p: float = 0.5) -> Tensor:
    """Raw prediction grid [N, A*(9+C), G, G]; masks once, before the head."""
    _check_image(image, params.hyper)
    feat = _backbone(image, params)
    feat = _apply_feature_drop(feat, params, mode, rng, method, dropout_p)
    out = conv2d(feat, params.tensors["head.weight"], stride=1, padding=0)
    return bias_add(out, params.tensors["head.bias"])


def classifier_forward(image: Tensor, params: ModelParams, mode: str, rng,
                       method: str = "dropblock", dropout_p: float = 0.5) -> Tensor:
    """Class logits [N, C]."""
    _check_image(image, params.hyper)
    feat = _backbone(image, params)
    feat = _apply_feature_drop(feat, params, mode, rng, method, dropout_p)
    n = feat.shape[0]
    flat = reshape(feat, (n, feat.shape[1] * feat.shape[2] * feat.shape[3]))
    return dense(flat, params.tensors["fc.weight"], params.tensors["fc.bias"])


# -- box geometry --------------------------------------------------------------------


def _giou_terms(px, py, pw, ph, qx, qy, qw, qh):
    """GIoU on center-format boxes; works on same-shape Tensors."""
    half = 0.5
    ax1, ax2 = sub(px, scale(pw, half)), px + scale(pw, half)
    ay1, ay2 = sub(py, scale(ph, half)), py + scale(ph, half)
    bx1, bx2 = sub(qx, scale(qw, half)), qx + scale(qw, half)
    by1, by2 = sub(qy, scale(qh, half)), qy + scale(qh, half)
    iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)))
    ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)))
    inter = mul(iw, ih)
    union = sub(mul(pw, ph) + mul(qw, qh), inter)
    iou = div(inter, union)
    cw = sub(maximum(ax2, bx2), minimum(ax1, bx1))
    ch = sub(maximum(ay2, by2), minimum(ay1, by1))
    carea = mul(cw, ch)
    return sub(iou, div(sub(carea, union), carea))


def giou(a, b) -> float:
    """GIoU of two center-format boxes, in (-1, 1]; the loss used is 1 - GIoU."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ContractError("giou requires positive box dimensions")
    t = [Tensor(np.asarray([v], dtype=np.float64)) for v in (*a, *b)]
    return float(_giou_terms(*t).data[0])


def gaussian_nll_t(mu: Tensor, sigma: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise negative log likelihood 0.5*log(2*pi*sigma^2) + (t-mu)^2/(2*sigma^2)."""
    t = Tensor(np.asarray(target, dtype=np.float32))
    err = square(sub(mu, t))
    return (log(sigma) + _HALF_LOG_2PI) + div(err, scale(square(sigma), 2.0))


def gaussian_nll(pred: GaussianBox, target) -> float:
    """Summed NLL of 4 box coordinates under independent Gaussians."""
    pred.validate()
    mu = Tensor(np.asarray([pred.mu_x, pred.mu_y, pred.mu_w, pred.mu_h]))
    sg = Tensor(np.asarray([pred.sigma_x, pred.sigma_y, pred.sigma_w, pred.sigma_h]))
    return float(tsum(gaussian_nll_t(mu, sg, np.asarray(target))).item())


def sigma_from_raw(raw: Tensor) -> Tensor:
    return softplus(raw) + SIGMA_FLOOR


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _anchor_shape_iou(w, h, aw, ah) -> float:
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def _encode_against(gt: GtBox, anchor, gy: int, gx: int, grid: int) -> np.ndarray:
    return np.array(
        [
            gt.x * grid - gx,
            gt.y * grid - gy,
            math.log(gt.w / anchor[0]),
            math.log(gt.h / anchor[1]),
        ],
        dtype=np.float64,
    )


def encode_box(gt: GtBox, anchors, grid: int):
    """(anchor index, cell row, cell col, encoded target [tx, ty, tw, th])."""
    gt.validate()
    gx = min(int(gt.x * grid), grid - 1)
    gy = min(int(gt.y * grid), grid - 1)
    a = max(
        range(len(anchors)),
        key=lambda i: _anchor_shape_iou(gt.w, gt.h, anchors[i][0], anchors[i][1]),
    )
    return a, gy, gx, _encode_against(gt, anchors[a], gy, gx, grid)


def decode(raw, anchors, conf_thresh: float):
    """Decode one image's raw grid into Detections above the confidence gate.

    Centers are (cell + sigmoid(t)) / G, sizes anchor * exp(t), sigmas
    softplus(raw) + 1e-4; confidence = objectness * max class probability.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ContractError("conf_thresh must lie in [0, 1]")
    arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ContractError("decode expects a single image grid")
        arr = arr[0]
    arr = arr.astype(np.float64)
    n_anchor = len(anchors)
    grid = arr.shape[-1]
    classes = arr.shape[0] // n_anchor - 9
    cols, rows = np.meshgrid(np.arange(grid), np.arange(grid))
    dets = []
    for a in range(n_anchor):
        base = a * (9 + classes)
        x = (cols + _sigmoid_np(arr[base + 0])) / grid
        y = (rows + _sigmoid_np(arr[base + 1])) / grid
        w = anchors[a][0] * np.exp(arr[base + 2])
        h = anchors[a][1] * np.exp(arr[base + 3])
        sg = _softplus_np(arr[base + 4 : base + 8]) + SIGMA_FLOOR
        obj = _sigmoid_np(arr[base + 8])
        logits = arr[base + 9 : base + 9 + classes]
        shifted = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=0, keepdims=True)
        conf = obj * probs.max(axis=0)
        for gy, gx in zip(*np.nonzero(conf >= conf_thresh)):
            dets.append(
                Detection(
                    box=(float(x[gy, gx]), float(y[gy, gx]), float(w[gy, gx]), float(h[gy, gx])),
                    sigma=tuple(float(s) for s in sg[:, gy, gx]),
                    class_probs=probs[:, gy, gx].copy(),
                    objectness=float(obj[gy, gx]),
                )
            )
    return dets


# -- loss ------------------------------------------------------------------------------


def assign_targets(gts, anchors, grid: int):
    """Greedy one-to-one assignment of ground truths to (cell, anchor) slots.

    Each box lands in the cell containing its center, at the free anchor with
    the highest shape IoU; a box whose slots are all taken is skipped.
    """
    taken = set()
    out = []
    for gt in gts:
        gt.validate()
        gx = min(int(gt.x * grid), grid - 1)
        gy = min(int(gt.y * grid), grid - 1)
        order = sorted(
            range(len(anchors)),
            key=lambda i: -_anchor_shape_iou(gt.w, gt.h, anchors[i][0], anchors[i][1]),
        )
        for a in order:
            if (a, gy, gx) in taken:
                continue
            taken.add((a, gy, gx))
            out.append((a, gy, gx, _encode_against(gt, anchors[a], gy, gx, grid), gt))
            break
    return out


def total_loss(raw: Tensor, targets, params: ModelParams, lambda_wd=5e-4,
               lambda_box=1.0, lambda_obj=1.0, lambda_cls=1.0,
               use_gaussian=True, use_giou=True):
    """Composite detector loss; returns (scalar Tensor, float term breakdown).

    box: per-assigned-anchor Gaussian NLL on encoded coordinates (or squared
    error when use_gaussian is off) plus 1 - GIoU on the decoded box; obj:
    binary cross entropy on objectness, positives and negatives each averaged
    so grid size does not drown the positives; cls: cross entropy on assigned
    cells; wd: lambda_wd * sum of squared weight entries (biases exempt).
    """
    hyper = params.hyper
    anchors, grid, classes = hyper["anchors"], hyper["grid"], hyper["classes"]
    n_anchor = len(anchors)
    batch = raw.shape[0]
    if len(targets) != batch:
        raise ContractError(f"{len(targets)} target lists for batch of {batch}")

    assigned = []
    for b, gts in enumerate(targets):
        for a, gy, gx, t, gt in assign_targets(gts, anchors, grid):
            assigned.append((b, a, gy, gx, t, gt))
    n_pos = len(assigned)

    # objectness: BCE over every anchor slot, positive and negative means
    obj_ch = np.array([a * (9 + classes) + 8 for a in range(n_anchor)])
    obj_logits = raw[:, obj_ch, :, :]
    obj_target = np.zeros((batch, n_anchor, grid, grid), dtype=np.float32)
    for b, a, gy, gx, _, _ in assigned:
        obj_target[b, a, gy, gx] = 1.0
    bce = bce_with_logits(obj_logits, obj_target)
    n_neg = obj_target.size - n_pos
    obj_term = scale(tsum(mul(bce, Tensor(1.0 - obj_target))), 1.0 / max(n_neg, 1))
    if n_pos:
        obj_term = obj_term + scale(tsum(mul(bce, Tensor(obj_target))), 1.0 / n_pos)

    terms = {"obj": obj_term.item()}
    box_term = Tensor(0.0)
    cls_term = Tensor(0.0)
    terms["box_nll"] = terms["box_giou"] = terms["cls"] = 0.0
    if n_pos:
        b_i = np.array([r[0] for r in assigned])
        a_i = np.array([r[1] for r in assigned])
        gy_i = np.array([r[2] for r in assigned])
        gx_i = np.array([r[3] for r in assigned])
        t_enc = np.stack([r[4] for r in assigned]).astype(np.float32)
        base = a_i * (9 + classes)

        g8 = raw[b_i[:, None], base[:, None] + np.arange(8)[None, :],
                 gy_i[:, None], gx_i[:, None]]
        mu_xy = sigmoid(g8[:, 0:2])
        mu_wh = g8[:, 2:4]
        sig = sigma_from_raw(g8[:, 4:8])

        if use_gaussian:
            nll = tsum(gaussian_nll_t(mu_xy, sig[:, 0:2], t_enc[:, 0:2])) + tsum(
                gaussian_nll_t(mu_wh, sig[:, 2:4], t_enc[:, 2:4])
            )
        else:
            nll = tsum(square(sub(mu_xy, Tensor(t_enc[:, 0:2])))) + tsum(
                square(sub(mu_wh, Tensor(t_enc[:, 2:4])))
            )
        box_term = scale(nll, 1.0 / n_pos)
        terms["box_nll"] = box_term.item()

        if use_giou:
            aw = np.array([anchors[a][0] for a in a_i], dtype=np.float32)
            ah = np.array([anchors[a][1] for a in a_i], dtype=np.float32)
            px = scale(mu_xy[:, 0] + Tensor(gx_i.astype(np.float32)), 1.0 / grid)
            py = scale(mu_xy[:, 1] + Tensor(gy_i.astype(np.float32)), 1.0 / grid)
            pw = mul(exp(mu_wh[:, 0]), Tensor(aw))
            ph = mul(exp(mu_wh[:, 1]), Tensor(ah))
            gt_arr = np.array([[r[5].x, r[5].y, r[5].w, r[5].h] for r in assigned],
                              dtype=np.float32)
            g = _giou_terms(px, py, pw, ph, Tensor(gt_arr[:, 0]), Tensor(gt_arr[:, 1]),
                            Tensor(gt_arr[:, 2]), Tensor(gt_arr[:, 3]))
            giou_term = tmean(sub(Tensor(np.ones(n_pos, np.float32)), g))
            terms["box_giou"] = giou_term.item()
            box_term = box_term + giou_term

        cls_idx = np.array([r[5].cls for r in assigned])
        logits = raw[b_i[:, None], (base + 9)[:, None] + np.arange(classes)[None, :],
                     gy_i[:, None], gx_i[:, None]]
        lsm = log_softmax(logits, axis=-1)
        picked = lsm[np.arange(n_pos), cls_idx]
        cls_term = scale(tmean(picked), -1.0)
        terms["cls"] = cls_term.item()

    wd = Tensor(0.0)
    for w in params.weight_tensors():
        wd = wd + tsum(square(w))
    terms["wd"] = wd.item()

    loss = (
        scale(box_term, lambda_box)
        + scale(obj_term, lambda_obj)
        + scale(cls_term, lambda_cls)
        + scale(wd, lambda_wd)
    )
    terms["total"] = loss.item()
    return loss, terms


# -- persistence -----------------------------------------------------------------------


def save_params(path, params: ModelParams) -> None:
    """Write weights: magic "MCBK", u32 version, u32-length-prefixed arch tag
    and hyperparameter JSON, u32 tensor count, then per tensor: u32 name
    length + UTF-8 name, u32 rank, rank u32 extents, raw little-endian
    float32 data.  All integers little-endian."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    arch = params.arch.encode("utf-8")
    buf += struct.pack("<I", len(arch)) + arch
    hyper = json.dumps(params.hyper, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(hyper)) + hyper
    buf += struct.pack("<I", len(params.tensors))
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        buf += np.ascontiguousarray(t.data).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise WeightsError(f"{path}: bad magic {bytes(view[:4])!r}")
    pos = 4

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", view, pos)
        pos += 4
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise WeightsError(f"{path}: unsupported format version {version}")
    n = u32()
    arch = bytes(view[pos : pos + n]).decode("utf-8")
    pos += n
    n = u32()
    hyper = json.loads(bytes(view[pos : pos + n]).decode("utf-8"))
    pos += n
    tensors = {}
    for _ in range(u32()):
        n = u32()
        name = bytes(view[pos : pos + n]).decode("utf-8")
        pos += n
        rank = u32()
        shape = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    if pos != len(raw):
        raise WeightsError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelParams(arch, hyper, tensors)


def check_compatible(loaded: ModelParams, reference: ModelParams) -> None:
    """Raise WeightsError naming the first offending tensor or field."""
    if loaded.arch != reference.arch:
        raise WeightsError(f"architecture tag {loaded.arch!r} != {reference.arch!r}")
    ref_names = list(reference.tensors)
    got_names = list(loaded.tensors)
    if got_names != ref_names:
        missing = [n for n in ref_names if n not in loaded.tensors]
        extra = [n for n in got_names if n not in reference.tensors]
        bad = (missing + extra + ["tensor order"])[0]
        raise WeightsError(f"tensor set mismatch at {bad!r}")
    for name in ref_names:
        a, b = loaded.tensors[name].shape, reference.tensors[name].shape
        if a != b:
            raise WeightsError(f"tensor {name!r} has shape {a}, expected {b}")
