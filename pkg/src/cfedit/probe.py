"""Deterministic pixel-statistics probe for toy images.

Classifies the dominant object's color (nearest prototype) and shape
(bounding-box fill ratio), and provides the continuous scores the trend
experiments assert on. Purely a function of pixel values; no learned state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from cfedit.corpus import ToyCorpusSpec, parse_caption

FG_THRESHOLD = 0.25      # L2 distance from background marking foreground
MIN_OBJECT_PIXELS = 12

# fill ratio of the object's bounding box: square 1.0, circle pi/4, triangle 0.5
_SHAPE_FILL = {"square": 1.0, "circle": np.pi / 4.0, "triangle": 0.5}


@dataclass(frozen=True)
class ProbeReading:
    shape: str | None
    color: str | None
    fill_ratio: float
    mean_rgb: tuple[float, float, float]
    n_pixels: int


def _to_hwc(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def foreground_mask(img, spec: ToyCorpusSpec) -> np.ndarray:
    arr = _to_hwc(img)
    bg = np.asarray(spec.background)
    return np.linalg.norm(arr - bg, axis=2) > FG_THRESHOLD


def read_object(img, spec: ToyCorpusSpec) -> ProbeReading:
    """Classify the largest connected foreground object."""
    arr = _to_hwc(img)
    mask = foreground_mask(arr, spec)
    labels, n = ndimage.label(mask)
    if n == 0:
        return ProbeReading(None, None, 0.0, (0.0, 0.0, 0.0), 0)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    obj = labels == (int(np.argmax(sizes)) + 1)
    n_px = int(obj.sum())
    mean_rgb = tuple(float(v) for v in arr[obj].mean(axis=0))
    if n_px < MIN_OBJECT_PIXELS:
        return ProbeReading(None, None, 0.0, mean_rgb, n_px)
    ys, xs = np.nonzero(obj)
    bbox_area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = n_px / bbox_area
    shape = min(_SHAPE_FILL, key=lambda s: abs(fill - _SHAPE_FILL[s]))
    dists = {c: float(np.linalg.norm(np.asarray(mean_rgb) - np.asarray(rgb)))
             for c, rgb in spec.colors.items()}
    color = min(dists, key=dists.get)
    return ProbeReading(shape, color, float(fill), mean_rgb, n_px)


def caption_agreement(img, caption: str, spec: ToyCorpusSpec) -> tuple[float, dict]:
    """Mean slot agreement in [0, 1] between the probe reading and a caption."""
    color, shape = parse_caption(spec, caption)
    reading = read_object(img, spec)
    slots = {"color": float(reading.color == color), "shape": float(reading.shape == shape)}
    return sum(slots.values()) / len(slots), slots


def color_affinity(img, target_color: str, spec: ToyCorpusSpec) -> float:
    """Continuous proximity of the object's mean color to the target prototype,
    in (0, 1]; usable as a monotone attribute score under gradual edits."""
    reading = read_object(img, spec)
    proto = np.asarray(spec.colors[target_color])
    d = float(np.linalg.norm(np.asarray(reading.mean_rgb) - proto))
    return 1.0 / (1.0 + d)


def off_object_mse(source_img, edited_img, spec: ToyCorpusSpec, dilate: int = 3) -> float:
    """Pixel MSE restricted to the source image's background region (the
    foreground mask dilated by a small margin is excluded)."""
    src = _to_hwc(source_img)
    edt = _to_hwc(edited_img)
    if src.shape != edt.shape:
        raise ValueError("resolution mismatch")
    fg = foreground_mask(src, spec)
    fg = ndimage.binary_dilation(fg, iterations=dilate)
    bg = ~fg
    if not bg.any():
        return 0.0
    return float(((src[bg] - edt[bg]) ** 2).mean())
