"""Deterministic image-attribute measures used for labeling.

Colorfulness follows the opponent-channel statistic of Hasler and
Suesstrunk (std plus 0.3x mean magnitude of the rg/yb planes) with the
published 7-level scale.  Exposure uses a mean-luminance proxy binned
into 5 uniform classes, and composition measures the normalized distance
of a subject centroid to the nearest rule-of-thirds intersection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COLORFULNESS_THRESHOLDS = (15.0, 33.0, 45.0, 59.0, 82.0, 109.0)
COLORFULNESS_NAMES = (
    "not colorful",
    "slightly colorful",
    "moderately colorful",
    "averagely colorful",
    "quite colorful",
    "highly colorful",
    "extremely colorful",
)
EXPOSURE_EDGES = (51.0, 102.0, 153.0, 204.0)
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster stored row-major as a (height, width, 3) array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"Image: expected non-empty (H, W, 3) pixels, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"Image: pixels must be uint8, got {px.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AttributeLabels:
    """All attribute measures of one image, ready for a manifest record."""

    colorfulness_value: float
    colorfulness_level: int
    exposure_class: int
    composition_offset: float


def colorfulness(img: Image) -> float:
    """Opponent-channel colorfulness:
    sqrt(std_rg^2 + std_yb^2) + 0.3 * sqrt(mean_rg^2 + mean_yb^2)
    with rg = R - G and yb = (R + G)/2 - B."""
    px = img.pixels.astype(np.float64)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    std_term = math.sqrt(float(rg.var() + yb.var()))
    mean_term = math.sqrt(float(rg.mean() ** 2 + yb.mean() ** 2))
    return std_term + 0.3 * mean_term


def colorfulness_level(value: float, thresholds=COLORFULNESS_THRESHOLDS) -> int:
    """Bucket index 0..len(thresholds) using half-open [lo, hi) buckets."""
    if value < 0:
        raise ValueError(f"colorfulness_level: negative value {value}")
    return int(np.searchsorted(np.asarray(thresholds), value, side="right"))


def mean_luminance(img: Image) -> float:
    """Mean Rec.709 luma over all pixels, in [0, 255]."""
    px = img.pixels.astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    return float(wr * px[..., 0].mean() + wg * px[..., 1].mean() + wb * px[..., 2].mean())


def exposure_bin(img: Image, edges=EXPOSURE_EDGES) -> int:
    """Mean-luminance class 0..len(edges), half-open [lo, hi) buckets."""
    return int(np.searchsorted(np.asarray(edges), mean_luminance(img), side="right"))


def thirds_points(width: float, height: float) -> tuple[tuple[float, float], ...]:
    """The four rule-of-thirds intersections of a width x height frame."""
    return (
        (width / 3.0, height / 3.0),
        (2.0 * width / 3.0, height / 3.0),
        (width / 3.0, 2.0 * height / 3.0),
        (2.0 * width / 3.0, 2.0 * height / 3.0),
    )


def composition_offset(img: Image, centroid: tuple[float, float]) -> float:
    """Distance of the subject centroid to the nearest thirds intersection,
    normalized by the largest possible such distance (the frame corners),
    so 0 means exactly on a thirds point and 1 the farthest corner."""
    cx, cy = centroid
    w, h = float(img.width), float(img.height)
    if not (0.0 <= cx <= w and 0.0 <= cy <= h):
        raise ValueError(f"composition_offset: centroid {centroid} outside {w:g}x{h:g} frame")
    nearest = min(math.hypot(cx - px, cy - py) for px, py in thirds_points(w, h))
    return nearest / (math.hypot(w, h) / 3.0)


def measure_attributes(img: Image, centroid: tuple[float, float]) -> AttributeLabels:
    value = colorfulness(img)
    return AttributeLabels(
        colorfulness_value=value,
        colorfulness_level=colorfulness_level(value),
        exposure_class=exposure_bin(img),
        composition_offset=composition_offset(img, centroid),
    )
