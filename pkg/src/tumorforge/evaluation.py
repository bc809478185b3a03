"""FID score, segmentation metrics, and the augmentation A/B experiment.

Evaluation regions follow the standard composition: whole tumor
WT = ED + ET + NCR (grade > 0), tumor core TC = ET + NCR (grade >= 0.75),
and enhancing tumor ET (grade == 0.75).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core_data import DatasetManifest, GradeMask, MCSlice, SliceRecord
from .errors import DimensionMismatch, SplitOverlap, TooFewSamples
from .geometry import binarize, render_circles, simplify_to_circles
from .networks import NetworkHandle, build_feature_extractor
from .training import TrainConfig, train_segmentation, tumor_records

REGIONS = ("WT", "TC", "ET")
METRICS = ("dice", "sensitivity", "precision")

# predicted 5-class labels contributing to each region
_REGION_LABELS = {"WT": (2, 3, 4), "TC": (3, 4), "ET": (3,)}


@dataclass
class RegionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> "RegionCounts":
        pred = pred.astype(bool)
        gt = gt.astype(bool)
        return cls(
            tp=int((pred & gt).sum()),
            fp=int((pred & ~gt).sum()),
            fn=int((~pred & gt).sum()),
            tn=int((~pred & ~gt).sum()),
        )


@dataclass
class RegionScores:
    dice: float
    sensitivity: float
    precision: float


@dataclass
class SegScores:
    wt: RegionScores
    tc: RegionScores
    et: RegionScores

    def region(self, name: str) -> RegionScores:
        return {"WT": self.wt, "TC": self.tc, "ET": self.et}[name]

    def as_dict(self) -> dict:
        return {
            name: {m: getattr(self.region(name), m) for m in METRICS} for name in REGIONS
        }


def _scores_from_counts(c: RegionCounts) -> RegionScores:
    # empty ground truth: perfect score iff the prediction is empty too
    if c.tp + c.fn == 0:
        val = 1.0 if c.fp == 0 else 0.0
        return RegionScores(val, val, val)
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    sensitivity = c.tp / (c.tp + c.fn)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else 0.0
    return RegionScores(dice, sensitivity, precision)


def gt_region(gt: GradeMask, name: str) -> np.ndarray:
    if name == "WT":
        return gt.plane > 0
    if name == "TC":
        return gt.plane >= 0.75
    return gt.plane == 0.75


def pred_region(pred_labels: np.ndarray, name: str) -> np.ndarray:
    return np.isin(pred_labels, _REGION_LABELS[name])


def seg_metrics(pred_labels: np.ndarray, gt: GradeMask) -> SegScores:
    """Dice / sensitivity / precision per region from a 5-class label map."""
    pred_labels = np.asarray(pred_labels)
    if pred_labels.shape != gt.plane.shape:
        raise DimensionMismatch(f"{pred_labels.shape} vs {gt.plane.shape}")
    per = {}
    for name in REGIONS:
        counts = RegionCounts.from_masks(pred_region(pred_labels, name), gt_region(gt, name))
        per[name] = _scores_from_counts(counts)
    return SegScores(wt=per["WT"], tc=per["TC"], et=per["ET"])


def mean_seg_scores(pairs: list[tuple[np.ndarray, GradeMask]]) -> SegScores:
    """Average per-slice scores over (prediction, ground truth) pairs."""
    scores = [seg_metrics(p, g) for p, g in pairs]
    mean = {
        name: RegionScores(
            *(float(np.mean([getattr(s.region(name), m) for s in scores])) for m in METRICS)
        )
        for name in REGIONS
    }
    return SegScores(wt=mean["WT"], tc=mean["TC"], et=mean["ET"])


def predict_labels(unet: NetworkHandle, images: MCSlice) -> np.ndarray:
    probs = unet.infer(images.data)
    return np.argmax(probs, axis=0)


# --- FID ------------------------------------------------------------------------


def embed_features(
    records: list[SliceRecord] | list[MCSlice] | np.ndarray,
    psi: NetworkHandle | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Globally average-pooled frozen-backbone features, one vector per slice."""
    if psi is None:
        psi = build_feature_extractor("fixed_random", seed=seed)
    arrays = []
    for item in records:
        if isinstance(item, SliceRecord):
            arrays.append(item.images.data)
        elif isinstance(item, MCSlice):
            arrays.append(item.data)
        else:
            arrays.append(np.asarray(item, dtype=np.float32))
    feats = []
    with torch.no_grad():
        for arr in arrays:
            fmap = psi(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None])
            feats.append(fmap.mean(dim=(2, 3))[0].numpy())
    return np.stack(feats)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clamp to zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a: np.ndarray, features_b: np.ndarray, shrinkage: float = 0.0) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross
    square root computed as sqrt(sqrt(S_a) S_b sqrt(S_a)) via symmetric
    eigendecomposition and a 1e-6 ridge on both covariances. ``shrinkage``
    in (0, 1] blends each covariance toward its scaled identity, allowing
    sample counts at or below the feature dimension.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dims {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    if shrinkage == 0.0 and (len(a) <= dim or len(b) <= dim):
        raise TooFewSamples(
            f"need more samples than the {dim}-dim features (got {len(a)}, {len(b)}); "
            "enable covariance shrinkage"
        )

    def stats(x):
        mu = x.mean(axis=0)
        cov = np.cov(x, rowvar=False).reshape(dim, dim)
        if shrinkage > 0.0:
            cov = (1 - shrinkage) * cov + shrinkage * (np.trace(cov) / dim) * np.eye(dim)
        return mu, cov + 1e-6 * np.eye(dim)

    mu_a, cov_a = stats(a)
    mu_b, cov_b = stats(b)
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


# --- grade-prediction accuracy ----------------------------------------------------


def grade_prediction_accuracy(g_grade: NetworkHandle, records: list[SliceRecord]) -> float:
    """Per-pixel quantized grade accuracy inside the predicted tumor.

    The grade network is conditioned on the ground-truth binary mask (as
    during training); accuracy is measured over pixels whose quantized
    prediction is positive, against the ground-truth grade map.
    """
    from .geometry import quantize_grades

    correct, total = 0, 0
    for rec in records:
        grade = rec.grade_mask
        c = simplify_to_circles(grade)
        circles = render_circles(c, grade.height, grade.width)
        binary = binarize(grade)
        raw = g_grade.infer(np.stack([circles.plane, binary.plane]))
        pred = quantize_grades(raw[0]).plane
        inside = pred > 0
        correct += int((pred[inside] == grade.plane[inside]).sum())
        total += int(inside.sum())
    return correct / total if total else 0.0


# --- augmentation experiment -------------------------------------------------------


def evaluate_segmentation(unet: NetworkHandle, records: list[SliceRecord]) -> SegScores:
    pairs = []
    for rec in records:
        gt = rec.grade_mask if rec.grade_mask is not None else GradeMask(
            np.zeros((rec.images.height, rec.images.width), dtype=np.float32)
        )
        pairs.append((predict_labels(unet, rec.images), gt))
    return mean_seg_scores(pairs)


def augmentation_experiment(
    real: DatasetManifest,
    synth: DatasetManifest | None,
    test: DatasetManifest,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    n_real: int | None = None,
) -> dict[str, SegScores]:
    """Table-style A/B: baseline (real only) vs augmented (real + synth).

    Both runs share the seed and the real training subset; only the
    appended synthesized records differ.
    """
    train_ids = set(real.split_ids("train") or real.record_ids())
    test_ids = set(test.split_ids("test") or test.record_ids())
    overlap = train_ids & test_ids
    if overlap:
        raise SplitOverlap(f"test ids overlap training ids: {sorted(overlap)[:5]}")

    real_train = [real.load_record(rid) for rid in sorted(train_ids)]
    if n_real is not None:
        real_train = real_train[:n_real]
    synth_records = list(synth.iter_all()) if synth is not None else []
    test_records = [test.load_record(rid) for rid in sorted(test_ids)]

    subset = DatasetManifest(
        records=[r for r in real.records if r["id"] in {x.id for x in real_train}],
        splits={
            "train": [r.id for r in real_train],
            "val": real.split_ids("val"),
        },
        base_dir=real.base_dir,
    )
    baseline_net, _ = train_segmentation(subset, cfg)
    augmented_net, _ = train_segmentation(subset, cfg, extra_records=synth_records)

    results = {
        "baseline": evaluate_segmentation(baseline_net, test_records),
        "augmented": evaluate_segmentation(augmented_net, test_records),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, scores in results.items():
            write_scores(scores, out_dir / f"{name}.scores.json", label=name)
    return results


# --- report formatting ---------------------------------------------------------------


def write_scores(scores: SegScores, path: Path | str, label: str) -> Path:
    path = Path(path)
    doc = {"label": label, "scores": scores.as_dict()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_scores(path: Path | str) -> tuple[str, SegScores]:
    doc = json.loads(Path(path).read_text())
    per = {
        name: RegionScores(**{m: doc["scores"][name][m] for m in METRICS})
        for name in REGIONS
    }
    return doc["label"], SegScores(wt=per["WT"], tc=per["TC"], et=per["ET"])


def format_score_table(rows: list[tuple[str, SegScores]]) -> str:
    """Text table: one row per method, Dice/Sensitivity/Precision x WT/TC/ET."""
    header = ["Method"] + [f"{m.capitalize()} {r}" for m in METRICS for r in REGIONS]
    widths = [max(18, len(header[0]))] + [max(10, len(h)) for h in header[1:]]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for label, scores in rows:
        cells = [label.ljust(widths[0])]
        i = 1
        for m in METRICS:
            for r in REGIONS:
                cells.append(f"{getattr(scores.region(r), m):.4f}".ljust(widths[i]))
                i += 1
        lines.append("  ".join(cells))
    return "\n".join(lines)


def score_table_csv(rows: list[tuple[str, SegScores]]) -> str:
    header = ["method"] + [f"{m}_{r.lower()}" for m in METRICS for r in REGIONS]
    lines = [",".join(header)]
    for label, scores in rows:
        cells = [label] + [
            f"{getattr(scores.region(r), m):.6f}" for m in METRICS for r in REGIONS
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
