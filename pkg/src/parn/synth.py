"""Procedural handwritten-character corpus.

Each class is a stroke skeleton (a few random polylines); each sample
re-renders the skeleton with per-point jitter, a small global rotation and
scale, a random translation, and varying stroke thickness. The result is a
directory-compatible stand-in for character datasets: many visually
distinct classes, consistent within a class, black ink on white background.

Translation jitter is deliberately generous: matching samples against
queries then requires tolerance to object position, which is the regime
the comparison network is built for.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClassRecord, Dataset


@dataclass
class GlyphStyle:
    """Within-class variation knobs (pixel units at the base 28px scale)."""

    point_jitter: float = 0.65
    max_rotation_deg: float = 12.0
    max_translation: float = 3.0
    scale_range: tuple[float, float] = (0.88, 1.12)
    thickness_range: tuple[float, float] = (1.0, 1.5)


def _segment_distance(px, py, a, b):
    """Distance from every pixel (px, py) to segment a-b."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    if den < 1e-9:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _render(polylines, size: int, thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    xx = xx.astype(np.float64)
    yy = yy.astype(np.float64)
    ink = np.zeros((size, size))
    for pts in polylines:
        for a, b in zip(pts[:-1], pts[1:]):
            d = _segment_distance(xx, yy, a, b)
            ink = np.maximum(ink, np.clip(1.0 + (thickness / 2.0) - d, 0.0, 1.0))
    return (1.0 - ink).astype(np.float32)  # dark strokes on white


def _make_skeleton(rng: np.random.Generator, size: int):
    """Random stroke skeleton: 3-6 polylines of 2-3 points each."""
    lo, hi = size * 0.15, size * 0.85
    n_strokes = int(rng.integers(3, 7))
    strokes = []
    for _ in range(n_strokes):
        n_pts = int(rng.integers(2, 4))
        strokes.append(rng.uniform(lo, hi, size=(n_pts, 2)))
    return strokes


def _instance(skeleton, rng: np.random.Generator, size: int,
              style: GlyphStyle) -> np.ndarray:
    scale = size / 28.0
    theta = np.deg2rad(rng.uniform(-style.max_rotation_deg, style.max_rotation_deg))
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    s = rng.uniform(*style.scale_range)
    shift = rng.uniform(-style.max_translation, style.max_translation, size=2) * scale
    center = np.array([size / 2.0, size / 2.0])
    polylines = []
    for pts in skeleton:
        jittered = pts + rng.normal(0.0, style.point_jitter * scale, size=pts.shape)
        polylines.append((jittered - center) @ rot.T * s + center + shift)
    thickness = rng.uniform(*style.thickness_range) * scale
    return _render(polylines, size, thickness)


def make_synthetic_classes(n_classes: int, samples_per_class: int,
                           image_size: int, seed: int,
                           style: GlyphStyle | None = None) -> list[ClassRecord]:
    style = style or GlyphStyle()
    rng = np.random.default_rng(seed)
    records = []
    for ci in range(n_classes):
        skeleton = _make_skeleton(rng, image_size)
        images = [_instance(skeleton, rng, image_size, style)
                  for _ in range(samples_per_class)]
        records.append(ClassRecord(f"synthetic/{ci:05d}", images))
    return records


def make_synthetic_dataset(n_classes: int, samples_per_class: int = 20,
                           image_size: int = 28, seed: int = 0,
                           split: str = "train",
                           style: GlyphStyle | None = None) -> Dataset:
    return Dataset(make_synthetic_classes(n_classes, samples_per_class,
                                          image_size, seed, style),
                   split, image_size, 1)


def write_synthetic_corpus(root, n_classes: int = 1623,
                           samples_per_class: int = 20, image_size: int = 28,
                           seed: int = 0, classes_per_alphabet: int = 40,
                           style: GlyphStyle | None = None) -> Path:
    """Write an Omniglot-layout PNG tree (alphabet/character/images)."""
    from PIL import Image

    root = Path(root)
    records = make_synthetic_classes(n_classes, samples_per_class, image_size,
                                     seed, style)
    for ci, rec in enumerate(records):
        alphabet = f"alphabet{ci // classes_per_alphabet:03d}"
        cdir = root / alphabet / f"character{ci % classes_per_alphabet:03d}"
        cdir.mkdir(parents=True, exist_ok=True)
        for ii, img in enumerate(rec.images):
            arr = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr, "L").save(cdir / f"{ci:05d}_{ii:02d}.png")
    return root
