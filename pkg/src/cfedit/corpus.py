"""Seeded toy corpus: colored geometric shapes with templated captions.

Images are float32 RGB in [0, 1], channel-first. Every sampled item carries
the unique caption its parameters imply, so caption -> image supervision is
noise-free.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.10, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
}

DEFAULT_SHAPES = ("circle", "square", "triangle")

BACKGROUND = (0.12, 0.12, 0.12)


@dataclass(frozen=True)
class ToyCorpusSpec:
    resolution: int = 64
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    colors: dict[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_COLORS))
    size_range: tuple[float, float] = (0.18, 0.30)   # half-extent, fraction of resolution
    center_jitter: float = 0.12                      # fraction of resolution around center
    two_object_fraction: float = 0.0                 # "a {c} {s} left of a {c} {s}"
    background: tuple[float, float, float] = BACKGROUND

    def vocabulary(self) -> list[str]:
        words = ["a", "left", "of"] + sorted(self.shapes) + sorted(self.colors)
        return words

    def content_hash(self) -> str:
        blob = json.dumps({
            "resolution": self.resolution, "shapes": list(self.shapes),
            "colors": {k: list(v) for k, v in sorted(self.colors.items())},
            "size_range": list(self.size_range), "center_jitter": self.center_jitter,
            "two_object_fraction": self.two_object_fraction,
            "background": list(self.background),
        }, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _shape_mask(shape: str, res: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= half ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if shape == "triangle":
        # apex at (cx, cy - half), base corners at (cx +/- half, cy + half)
        return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def render(spec: ToyCorpusSpec, shape: str, color: str, cx: float, cy: float,
           half: float) -> np.ndarray:
    """Render one object; returns float32 array of shape (3, res, res)."""
    res = spec.resolution
    img = np.empty((res, res, 3), dtype=np.float32)
    img[...] = np.asarray(spec.background, dtype=np.float32)
    mask = _shape_mask(shape, res, cx, cy, half)
    img[mask] = np.asarray(spec.colors[color], dtype=np.float32)
    return img.transpose(2, 0, 1)


def render_caption(spec: ToyCorpusSpec, caption: str, rng: np.random.Generator | None = None,
                   centered: bool = True) -> np.ndarray:
    """Render a canonical image for a single-object caption "a {color} {shape}"."""
    color, shape = parse_caption(spec, caption)
    res = spec.resolution
    if rng is None or centered:
        cx = cy = res / 2.0
        half = res * sum(spec.size_range) / 2.0
    else:
        cx, cy, half = _sample_geometry(spec, rng)
    return render(spec, shape, color, cx, cy, half)


def parse_caption(spec: ToyCorpusSpec, caption: str) -> tuple[str, str]:
    words = caption.strip().lower().split()
    if len(words) != 3 or words[0] != "a" or words[1] not in spec.colors \
            or words[2] not in spec.shapes:
        raise ValueError(f"caption {caption!r} does not match 'a {{color}} {{shape}}'")
    return words[1], words[2]


def _sample_geometry(spec: ToyCorpusSpec, rng: np.random.Generator,
                     x_band: tuple[float, float] = (0.5, 0.5)) -> tuple[float, float, float]:
    res = spec.resolution
    j = spec.center_jitter * res
    cx = res * rng.uniform(*x_band) + rng.uniform(-j, j)
    cy = res / 2.0 + rng.uniform(-j, j)
    half = res * rng.uniform(*spec.size_range)
    return cx, cy, half


def sample_item(spec: ToyCorpusSpec, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """One (image, caption) pair."""
    colors = sorted(spec.colors)
    shapes = sorted(spec.shapes)
    if rng.uniform() < spec.two_object_fraction:
        c1, c2 = rng.choice(colors, size=2)
        s1, s2 = rng.choice(shapes, size=2)
        res = spec.resolution
        img = np.empty((res, res, 3), dtype=np.float32)
        img[...] = np.asarray(spec.background, dtype=np.float32)
        for (c, s), band in (((c1, s1), (0.25, 0.30)), ((c2, s2), (0.70, 0.75))):
            cx, cy, half = _sample_geometry(spec, rng, x_band=band)
            half = min(half, res * 0.18)
            img[_shape_mask(s, res, cx, cy, half)] = np.asarray(spec.colors[c], np.float32)
        return img.transpose(2, 0, 1), f"a {c1} {s1} left of a {c2} {s2}"
    color = colors[rng.integers(len(colors))]
    shape = shapes[rng.integers(len(shapes))]
    cx, cy, half = _sample_geometry(spec, rng)
    return render(spec, shape, color, cx, cy, half), f"a {color} {shape}"


def sample_batch(spec: ToyCorpusSpec, rng: np.random.Generator,
                 n: int) -> tuple[torch.Tensor, list[str]]:
    imgs, caps = zip(*(sample_item(spec, rng) for _ in range(n)))
    return torch.from_numpy(np.stack(imgs)), list(caps)
