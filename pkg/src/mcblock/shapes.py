"""Deterministic synthetic-shapes dataset with ID and OOD splits.

Scenes are 64x64 RGB: a gray background with Gaussian pixel noise and 1-3
solid-colored shapes.  The in-distribution classes are filled circle, square,
and triangle; the out-of-distribution split contains only novel shapes
(cross, ring, six-pointed star) drawn with the same palette, size range, and
noise statistics, so the distribution shift is the shape semantics, not
low-level image statistics.

Every image is generated from its own stream ``Rng(seed).split(split_id)
.split(index)``, so generation parallelizes per image and any (split, n,
seed) triple regenerates byte-identical files.  Ground-truth boxes are the
tight bounding boxes of the rasterized shape pixels.

On-disk layout: <root>/<split>/images/NNNNNN.ppm, <root>/<split>/labels.jsonl
(one object per line: image, class, and center-format x, y, w, h normalized
to [0, 1]), and <root>/manifest.json.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import GtBox
from .ppm import read_ppm, write_ppm
from .rng import Rng

IMAGE_SIZE = 64
ID_CLASSES = ("circle", "square", "triangle")
OOD_CLASSES = ("cross", "ring", "star")
CLASS_NAMES = ID_CLASSES + OOD_CLASSES
PALETTE = (
    (220, 60, 60),
    (60, 200, 60),
    (70, 90, 220),
    (230, 210, 60),
    (200, 70, 200),
    (60, 200, 200),
)
BG_GRAY = 128
NOISE_SIGMA = 8.0
SIZE_RANGE = (14, 28)
MARGIN = 2
MAX_GT_IOU = 0.3
SPLIT_IDS = {"train": 0, "val": 1, "test-id": 2, "test-ood": 3}
MANIFEST_VERSION = 1


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs, ys


def _raster(cls: int, cx: float, cy: float, s: float) -> np.ndarray:
    """Boolean pixel mask of one shape with target extent ~s pixels."""
    xs, ys = _grid(IMAGE_SIZE)
    r = s / 2.0
    dx, dy = xs - cx, ys - cy
    if cls == 0:  # circle
        return dx * dx + dy * dy <= r * r
    if cls == 1:  # square
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if cls == 2:  # triangle, apex up
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if cls == 3:  # cross
        t = s / 6.0
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= t) & (np.abs(dx) <= r)
        )
    if cls == 4:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if cls == 5:  # six-pointed star: up triangle union down triangle
        up = (dy >= -r) & (dy <= r / 2) & (np.abs(dx) <= (dy + r) * 2 / 3)
        down = (dy <= r) & (dy >= -r / 2) & (np.abs(dx) <= (r - dy) * 2 / 3)
        return up | down
    raise ConfigError(f"unknown shape class {cls}")


def _mask_bbox_px(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def _iou_px(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0) + 1
    ih = min(ay1, by1) - max(ay0, by0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / (area_a + area_b - inter)


def render_scene(rng: Rng, ood: bool):
    """One scene from one stream: (uint8 image [H,W,3], list of (GtBox, mask))."""
    n_objects = 1 + rng.randint(3)
    class_pool = [i + 3 for i in range(3)] if ood else [0, 1, 2]
    rng.shuffle(class_pool)
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), float(BG_GRAY))
    placed = []
    for k in range(n_objects):
        cls = class_pool[k]
        for _ in range(40):
            s = rng.uniform(SIZE_RANGE[0], SIZE_RANGE[1])
            half = s / 2.0
            cx = rng.uniform(MARGIN + half, IMAGE_SIZE - MARGIN - half)
            cy = rng.uniform(MARGIN + half, IMAGE_SIZE - MARGIN - half)
            mask = _raster(cls, cx, cy, s)
            if not mask.any():
                continue
            bbox = _mask_bbox_px(mask)
            if any(_iou_px(bbox, p[2]) >= MAX_GT_IOU for p in placed):
                continue
            color = PALETTE[rng.randint(len(PALETTE))]
            placed.append((cls, mask, bbox, color))
            break
    objects = []
    for cls, mask, bbox, color in placed:
        img[mask] = color
    for cls, mask, bbox, _ in placed:
        x0, y0, x1, y1 = bbox
        gt = GtBox(
            cls=cls,
            x=(x0 + x1 + 1) / 2.0 / IMAGE_SIZE,
            y=(y0 + y1 + 1) / 2.0 / IMAGE_SIZE,
            w=(x1 - x0 + 1) / IMAGE_SIZE,
            h=(y1 - y0 + 1) / IMAGE_SIZE,
        )
        objects.append((gt, mask))
    noise = rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    img = np.clip(np.rint(img + noise), 0, 255).astype(np.uint8)
    return img, objects


def generate(root, split: str, n: int, seed: int) -> Path:
    """Write ``n`` images of one split; byte-identical for equal arguments."""
    if split not in SPLIT_IDS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLIT_IDS)}")
    if n < 1:
        raise ConfigError("n must be >= 1")
    root = Path(root)
    img_dir = root / split / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ood = split == "test-ood"
    base = Rng(seed).split(SPLIT_IDS[split])
    lines = []
    for i in range(n):
        img, objects = render_scene(base.split(i), ood)
        name = f"{i:06d}.ppm"
        write_ppm(img_dir / name, img)
        for gt, _ in objects:
            lines.append(
                json.dumps(
                    {"image": f"images/{name}", "class": gt.cls,
                     "x": gt.x, "y": gt.y, "w": gt.w, "h": gt.h},
                    sort_keys=True,
                )
            )
    (root / split / "labels.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _update_manifest(root, split, n, seed)
    return root / split


def _update_manifest(root: Path, split: str, n: int, seed: int) -> None:
    path = root / "manifest.json"
    doc = {
        "format_version": MANIFEST_VERSION,
        "image_size": IMAGE_SIZE,
        "class_names": list(CLASS_NAMES),
        "id_class_ids": [0, 1, 2],
        "ood_class_ids": [3, 4, 5],
        "seed": seed,
        "splits": {},
    }
    if path.exists():
        old = json.loads(path.read_text(encoding="utf-8"))
        doc["splits"] = old.get("splits", {})
    doc["splits"][split] = {"n": n, "seed": seed}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(root, split: str):
    """(uint8 images [N,H,W,3], per-image ground-truth lists)."""
    split_dir = Path(root) / split
    labels = split_dir / "labels.jsonl"
    if not labels.exists():
        raise DataError(f"{labels}: missing; run gen-data first")
    by_image: dict[str, list] = {}
    for line in labels.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        by_image.setdefault(rec["image"], []).append(
            GtBox(rec["class"], rec["x"], rec["y"], rec["w"], rec["h"])
        )
    names = sorted(p.name for p in (split_dir / "images").glob("*.ppm"))
    if not names:
        raise DataError(f"{split_dir}/images: no images found")
    images = np.stack([read_ppm(split_dir / "images" / n) for n in names])
    gts = [by_image.get(f"images/{n}", []) for n in names]
    return images, gts


def images_to_input(imgs: np.ndarray) -> np.ndarray:
    """uint8 [N,H,W,3] -> float32 [N,3,H,W] in [0,1]."""
    return (imgs.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)
