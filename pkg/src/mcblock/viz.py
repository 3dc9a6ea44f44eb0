"""Annotated PPM overlays: detection boxes plus per-detection entropy text."""

from __future__ import annotations

import numpy as np

# 3x5 bitmap glyphs, one string per row
_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    ".": ("000", "000", "000", "000", "010"),
    "=": ("000", "111", "000", "111", "000"),
    "H": ("101", "101", "111", "101", "101"),
}

_BOX_COLORS = ((255, 255, 0), (0, 255, 255), (255, 0, 255), (255, 128, 0))


def _draw_text(img: np.ndarray, x: int, y: int, text: str, color) -> None:
    h, w, _ = img.shape
    for ch in text:
        glyph = _FONT.get(ch)
        if glyph is not None:
            for r, row in enumerate(glyph):
                for c, bit in enumerate(row):
                    if bit == "1" and 0 <= y + r < h and 0 <= x + c < w:
                        img[y + r, x + c] = color
        x += 4


def _draw_rect(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    h, w, _ = img.shape
    x0, x1 = max(0, min(x0, w - 1)), max(0, min(x1, w - 1))
    y0, y1 = max(0, min(y0, h - 1)), max(0, min(y1, h - 1))
    img[y0, x0 : x1 + 1] = color
    img[y1, x0 : x1 + 1] = color
    img[y0 : y1 + 1, x0] = color
    img[y0 : y1 + 1, x1] = color


def draw_detections(img: np.ndarray, dets) -> np.ndarray:
    """Return a copy of ``img`` with box outlines and H=<entropy> labels."""
    out = img.copy()
    h, w, _ = out.shape
    for i, det in enumerate(dets):
        x, y, bw, bh = det.box
        color = _BOX_COLORS[int(np.argmax(det.class_probs)) % len(_BOX_COLORS)]
        x0, y0 = int(round((x - bw / 2) * w)), int(round((y - bh / 2) * h))
        x1, y1 = int(round((x + bw / 2) * w)), int(round((y + bh / 2) * h))
        _draw_rect(out, x0, y0, x1, y1, color)
        _draw_text(out, x0 + 1, max(0, y0 - 6), f"H={det.entropy:.2f}", color)
    return out
