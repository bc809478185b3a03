"""Rejection-sampled synthesis of tumor slices from normal slices and
random concentric circles.

Per sample: render the outer circle, predict a binary tumor mask, reject
if any mask pixel leaves the brain support, predict grades, inpaint the
masked hole, and composite so every pixel outside the mask is bit-equal
to the source normal slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_data import DatasetManifest, GradeMask, MCSlice, SliceRecord, write_dataset
from .errors import EmptyDataset, RejectionBudgetExceeded
from .geometry import (
    ConcentricCircles,
    binarize,
    brain_support,
    quantize_positive_grades,
    render_circles,
    render_disk,
)
from .networks import ModelBundle

# Algorithm defaults at the 256 reference size: centers in [80, 160],
# radii in [0, 40]; other sizes scale proportionally.
CENTER_FRACTIONS = (0.3125, 0.625)
RADIUS_FRACTION = 0.15625


@dataclass
class SynthesisConfig:
    n_images: int
    center_range: tuple[float, float]
    radius_range: tuple[float, float]
    max_attempts_per_image: int = 100
    seed: int = 0

    @classmethod
    def for_size(cls, size: int, n_images: int, seed: int = 0, max_attempts_per_image: int = 100):
        return cls(
            n_images=n_images,
            center_range=(CENTER_FRACTIONS[0] * size, CENTER_FRACTIONS[1] * size),
            radius_range=(0.0, RADIUS_FRACTION * size),
            max_attempts_per_image=max_attempts_per_image,
            seed=seed,
        )


def sample_circles(rng: np.random.Generator, cfg: SynthesisConfig) -> ConcentricCircles:
    """Uniform center, three uniform radii sorted descending."""
    cx = rng.uniform(*cfg.center_range)
    cy = rng.uniform(*cfg.center_range)
    radii = sorted((rng.uniform(*cfg.radius_range) for _ in range(3)), reverse=True)
    return ConcentricCircles(cx=cx, cy=cy, r1=radii[0], r2=radii[1], r3=radii[2])


def synthesize_one(
    x_n: MCSlice, c: ConcentricCircles, models: ModelBundle
) -> tuple[MCSlice, GradeMask] | None:
    """One synthesis attempt; returns None when the containment test rejects.

    The predicted grade map is restricted to the predicted binary support
    (positive grades only inside, zero outside), so the two masks can
    never disagree.
    """
    models.require_generators()
    h, w = x_n.height, x_n.width
    support = brain_support(x_n)

    disk = render_disk(c.cx, c.cy, c.r1, h, w)
    if disk.count() == 0:
        # an empty outer circle requests no tumor at all
        m_binary = disk
    else:
        prob = models.g_binary.infer(np.stack([disk.plane, support.plane]))
        m_binary = binarize(prob[0], 0.5)

    # containment: every predicted tumor pixel must lie on brain support
    if np.any(m_binary.plane * (1.0 - support.plane) != 0):
        return None

    circles = render_circles(c, h, w)
    grade_raw = models.g_grade.infer(np.stack([circles.plane, m_binary.plane]))
    grade_plane = np.where(
        m_binary.plane > 0, quantize_positive_grades(grade_raw[0]), np.float32(0.0)
    ).astype(np.float32)
    m_grade = GradeMask(grade_plane)

    masked = x_n.data * (1.0 - m_binary.plane)[None]
    x5 = np.concatenate([masked, m_grade.plane[None]], axis=0)
    raw = models.g_inpaint.infer(x5, m_grade.plane[None])
    inside = m_binary.plane[None] > 0
    out = np.where(inside, raw.astype(np.float32), x_n.data)
    return MCSlice(out, normalized=x_n.normalized), m_grade


def normal_records(manifest: DatasetManifest) -> list[SliceRecord]:
    """Slices usable as normal inputs: empty or absent grade mask."""
    return [
        r
        for r in manifest.iter_all()
        if r.grade_mask is None or r.grade_mask.is_empty()
    ]


def synthesize_batch(
    normals: DatasetManifest,
    cfg: SynthesisConfig,
    models: ModelBundle,
    out_dir: Path | str,
    fixed_circles: ConcentricCircles | None = None,
) -> DatasetManifest:
    """Synthesize ``cfg.n_images`` accepted samples and write a dataset.

    Image j draws circles from its own generator seeded ``seed + j`` and
    walks the normal slices round-robin starting at index j, so the batch
    is deterministic and parallelizable per image. ``fixed_circles``
    bypasses sampling for user-specified tumors.
    """
    sources = normal_records(normals)
    if not sources:
        raise EmptyDataset("no normal (tumor-free) slices to synthesize from")
    records: list[SliceRecord] = []
    for j in range(cfg.n_images):
        rng = np.random.default_rng(cfg.seed + j)
        result = None
        for attempt in range(cfg.max_attempts_per_image):
            x_n = sources[(j + attempt) % len(sources)].images
            c = fixed_circles if fixed_circles is not None else sample_circles(rng, cfg)
            result = synthesize_one(x_n, c, models)
            if result is not None:
                break
        if result is None:
            raise RejectionBudgetExceeded(
                f"image {j}: no acceptance in {cfg.max_attempts_per_image} attempts"
            )
        image, grade = result
        records.append(
            SliceRecord(
                id=f"synth{j:04d}",
                images=image,
                grade_mask=grade,
                source="synthesized",
                seed=cfg.seed + j,
            )
        )
    splits = {"synth": [r.id for r in records]}
    return write_dataset(records, splits, out_dir)
