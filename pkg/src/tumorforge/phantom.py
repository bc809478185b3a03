"""Deterministic phantom brain slices with ground-truth grade masks.

Stands in for clinical data at desk scale: an elliptical "brain" with
smooth per-contrast texture, plus (optionally) a blob tumor grown from
thresholded low-pass noise and partitioned into three nested grade
regions with contrast-specific intensity shifts (FLAIR/T2w hyperintense
edema, enhancing T1c rim, dark necrotic T1c core).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter, label

from .core_data import DatasetManifest, GradeMask, MCSlice, SliceRecord, write_dataset

# fraction of subjects per split, applied in subject order after shuffling
SPLIT_FRACTIONS = {"train": 0.8, "val": 0.1, "test": 0.1}


@dataclass
class PhantomConfig:
    size: int = 64
    n_subjects: int = 40
    slices_per_subject: int = 10
    tumor_probability: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("phantom size must be >= 32")
        if not 0.0 <= self.tumor_probability <= 1.0:
            raise ValueError("tumor_probability must lie in [0, 1]")


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Low-pass noise rescaled to [0, 1]."""
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma)
    lo, hi = noise.min(), noise.max()
    return ((noise - lo) / (hi - lo + 1e-12)).astype(np.float32)


def _ellipse_support(rng: np.random.Generator, size: int) -> np.ndarray:
    cy = size / 2 + rng.uniform(-size / 32, size / 32)
    cx = size / 2 + rng.uniform(-size / 32, size / 32)
    a = rng.uniform(0.33, 0.42) * size  # column semi-axis
    b = rng.uniform(0.31, 0.40) * size  # row semi-axis
    theta = rng.uniform(-0.3, 0.3)
    ys = np.arange(size)[:, None] - cy
    xs = np.arange(size)[None, :] - cx
    u = xs * np.cos(theta) + ys * np.sin(theta)
    v = -xs * np.sin(theta) + ys * np.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float32)


def _grow_tumor(
    rng: np.random.Generator, size: int, room: np.ndarray
) -> np.ndarray | None:
    """Grade plane for one tumor fully inside ``room``, or None if it failed.

    The tumor body is a level set of (radial falloff + smooth noise), so
    its outline is blobby rather than circular; nested thresholds carve
    the three grade regions.
    """
    coords = np.argwhere(room > 0)
    if coords.size == 0:
        return None
    for _ in range(8):
        cy, cx = coords[rng.integers(len(coords))]
        radius = rng.uniform(size / 14, size / 7)
        ys = np.arange(size)[:, None] - cy
        xs = np.arange(size)[None, :] - cx
        radial = 1.0 - np.hypot(xs, ys) / radius
        bumps = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
        bumps = bumps / (np.abs(bumps).max() + 1e-12)
        field = radial + 0.45 * bumps
        body = (field > 0.0) & (room > 0)
        labeled, n = label(body)
        if n == 0 or not body[cy, cx]:
            continue
        body = labeled == labeled[cy, cx]
        if body.sum() < 12:
            continue
        plane = np.zeros((size, size), dtype=np.float32)
        plane[body] = 0.5
        plane[body & (field > 0.42)] = 0.75
        plane[body & (field > 0.68)] = 1.0
        return plane
    return None


def _render_slice(
    rng: np.random.Generator, size: int, with_tumor: bool
) -> tuple[MCSlice, GradeMask]:
    support = _ellipse_support(rng, size)
    t = _smooth_field(rng, size, sigma=size / 12)
    u = _smooth_field(rng, size, sigma=size / 20)

    flair = 0.45 + 0.35 * t + 0.08 * u
    t1w = 0.55 + 0.30 * (1.0 - t) + 0.10 * u
    t1c = 0.50 + 0.28 * (1.0 - t) + 0.12 * u
    t2w = 0.40 + 0.40 * t + 0.06 * u

    grade = np.zeros((size, size), dtype=np.float32)
    if with_tumor:
        room = binary_erosion(support.astype(bool), iterations=3)
        grown = _grow_tumor(rng, size, room.astype(np.float32))
        if grown is not None:
            grade = grown

    wt = grade > 0
    ed = grade == 0.5
    et = grade == 0.75
    ncr = grade == 1.0
    if wt.any():
        # within-tumor texture so the inpainting task is not constant fill
        w = 0.85 + 0.15 * _smooth_field(rng, size, sigma=size / 24)
        flair = flair + (0.55 * ed + 0.35 * et + 0.30 * ncr) * w
        t2w = t2w + (0.50 * ed + 0.30 * et + 0.45 * ncr) * w
        t1w = t1w - 0.15 * wt * w
        t1c = t1c + 0.65 * et * w - 0.18 * ncr * w

    channels = np.stack([flair, t1w, t1c, t2w]).astype(np.float32)
    channels = np.clip(channels, 0.02, 2.5) * support[None]
    return MCSlice(channels, normalized=False), GradeMask(grade)


def subject_splits(n_subjects: int, seed: int) -> dict[str, list[int]]:
    """Deterministic subject-wise split assignment (val/test nonempty from 3 subjects up)."""
    order = list(np.random.default_rng(seed).permutation(n_subjects))
    n_val = max(1, round(SPLIT_FRACTIONS["val"] * n_subjects)) if n_subjects >= 3 else 0
    n_test = max(1, round(SPLIT_FRACTIONS["test"] * n_subjects)) if n_subjects >= 3 else 0
    n_train = n_subjects - n_val - n_test
    return {
        "train": sorted(int(s) for s in order[:n_train]),
        "val": sorted(int(s) for s in order[n_train : n_train + n_val]),
        "test": sorted(int(s) for s in order[n_train + n_val :]),
    }


def generate_phantom(config: PhantomConfig, out_dir: Path | str) -> DatasetManifest:
    """Generate the phantom dataset and write it under ``out_dir``.

    Each subject draws from its own generator seeded ``seed + subject``,
    so generation is reproducible and parallelizable per subject.
    """
    records: list[SliceRecord] = []
    subject_of: dict[str, int] = {}
    for subject in range(config.n_subjects):
        rng = np.random.default_rng(config.seed + subject)
        for idx in range(config.slices_per_subject):
            with_tumor = bool(rng.uniform() < config.tumor_probability)
            images, grade = _render_slice(rng, config.size, with_tumor)
            rid = f"s{subject:03d}_i{idx:02d}"
            records.append(
                SliceRecord(
                    id=rid,
                    images=images,
                    grade_mask=grade,
                    source="phantom",
                    seed=config.seed + subject,
                )
            )
            subject_of[rid] = subject
    by_split = subject_splits(config.n_subjects, config.seed)
    splits = {
        name: [r.id for r in records if subject_of[r.id] in members]
        for name, members in by_split.items()
    }
    return write_dataset(records, splits, out_dir)
