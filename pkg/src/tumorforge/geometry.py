"""Concentric-circle simplification of grade masks and masking arithmetic.

A grade mask collapses to five scalars: a shared center and three radii
chosen so the disk/annulus areas equal the per-grade pixel areas
(outermost annulus = edema, middle = enhancing tumor, innermost disk =
necrotic core). Rendering is the inverse map, rasterized by pixel-center
Euclidean distance with inclusive boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_fill_holes

from .core_data import CLIP_LO, BinaryMask, GradeMask, MCSlice
from .errors import DimensionMismatch, EmptyMask


@dataclass
class ConcentricCircles:
    """Shared center (cx = column, cy = row) and descending radii r1 >= r2 >= r3."""

    cx: float
    cy: float
    r1: float
    r2: float
    r3: float

    def __post_init__(self):
        if not (self.r1 >= self.r2 >= self.r3 >= 0):
            raise ValueError(
                f"radii must satisfy r1 >= r2 >= r3 >= 0, got "
                f"({self.r1}, {self.r2}, {self.r3})"
            )


def binarize(mask, threshold: float = 0.0) -> BinaryMask:
    """Support operator: 1 where the input exceeds ``threshold``, else 0.

    The default threshold 0 suits grade masks and raw skull-stripped
    images, whose background is exactly zero.
    """
    if isinstance(mask, (GradeMask, BinaryMask)):
        plane = mask.plane
    else:
        plane = np.asarray(mask)
    return BinaryMask((plane > threshold).astype(np.float32))


def centroid(mask: BinaryMask) -> tuple[float, float]:
    """Arithmetic mean (cx, cy) of nonzero pixel coordinates."""
    rows, cols = np.nonzero(mask.plane)
    if rows.size == 0:
        raise EmptyMask("centroid of an empty mask")
    return float(cols.mean()), float(rows.mean())


def simplify_to_circles(mask: GradeMask) -> ConcentricCircles:
    """Collapse a grade mask to area-preserving concentric circles."""
    plane = mask.plane
    a_ed = int((plane == 0.5).sum())
    a_et = int((plane == 0.75).sum())
    a_ncr = int((plane == 1.0).sum())
    if a_ed + a_et + a_ncr == 0:
        raise EmptyMask("cannot simplify an empty grade mask")
    cx, cy = centroid(binarize(mask))
    r3 = math.sqrt(a_ncr / math.pi)
    r2 = math.sqrt((a_ncr + a_et) / math.pi)
    r1 = math.sqrt((a_ncr + a_et + a_ed) / math.pi)
    return ConcentricCircles(cx=cx, cy=cy, r1=r1, r2=r2, r3=r3)


def _distance_grid(cx: float, cy: float, height: int, width: int) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    return np.hypot(xs - cx, ys - cy)


def render_circles(c: ConcentricCircles, height: int, width: int) -> GradeMask:
    """Rasterize circles to a grade mask (innermost value wins on ties).

    A zero radius renders empty (its disk has zero area), so a pixel
    center sitting exactly on the shared center is not special-cased in.
    """
    d = _distance_grid(c.cx, c.cy, height, width)
    plane = np.zeros((height, width), dtype=np.float32)
    if c.r1 > 0:
        plane[d <= c.r1] = 0.5
    if c.r2 > 0:
        plane[d <= c.r2] = 0.75
    if c.r3 > 0:
        plane[d <= c.r3] = 1.0
    return GradeMask(plane)


def render_disk(cx: float, cy: float, r: float, height: int, width: int) -> BinaryMask:
    """Rasterize a single filled disk (the outermost circle); r = 0 is empty."""
    if r <= 0:
        return BinaryMask(np.zeros((height, width), dtype=np.float32))
    d = _distance_grid(cx, cy, height, width)
    return BinaryMask((d <= r).astype(np.float32))


def apply_mask(x: MCSlice, m: BinaryMask) -> MCSlice:
    """Zero out the masked region: every channel times (1 - m)."""
    if (x.height, x.width) != m.plane.shape:
        raise DimensionMismatch(
            f"slice {x.height}x{x.width} vs mask {m.plane.shape}"
        )
    return MCSlice(x.data * (1.0 - m.plane)[None], normalized=False)


def quantize_grades(continuous: np.ndarray) -> GradeMask:
    """Snap each pixel to the nearest grade value; ties break downward."""
    x = np.asarray(continuous, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValueError("grade quantization requires finite values")
    plane = np.where(x <= 0.25, 0.0, np.where(x <= 0.625, 0.5, np.where(x <= 0.875, 0.75, 1.0)))
    return GradeMask(plane.astype(np.float32))


def quantize_positive_grades(continuous: np.ndarray) -> np.ndarray:
    """Snap to the nearest of {0.5, 0.75, 1.0} (no background bucket)."""
    x = np.asarray(continuous, dtype=np.float32)
    return np.where(x <= 0.625, 0.5, np.where(x <= 0.875, 0.75, 1.0)).astype(np.float32)


def brain_support(x: MCSlice) -> BinaryMask:
    """Brain-shape mask of a slice.

    Raw skull-stripped slices have exact-zero background, so support is
    simply {T1w > 0}. Normalization clips the lower tail to -0.5, which
    crushes dark in-brain pixels onto the background value; since the
    contrasts are complementary, a pixel is treated as background only
    when it sits at the clip floor in every channel, and the few
    remaining enclosed holes are filled morphologically.
    """
    if not x.normalized:
        return binarize(x.channel("T1w"), 0.0)
    rough = (x.data > CLIP_LO).any(axis=0)
    return BinaryMask(binary_fill_holes(rough).astype(np.float32))


def mask_to_png(mask, path) -> None:
    """Visual-inspection export: mask values scaled by 255."""
    from PIL import Image

    plane = mask.plane if isinstance(mask, (GradeMask, BinaryMask)) else np.asarray(mask)
    img = np.clip(plane * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
