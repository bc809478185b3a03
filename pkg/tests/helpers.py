"""Shared test utilities: independent oracles and a finite-difference
gradient checker. Oracles here deliberately avoid the library's vectorized
code paths."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch


def brute_disk_count(cx: float, cy: float, r: float, height: int, width: int) -> int:
    """Count pixels with center distance <= r by plain loops."""
    n = 0
    for y in range(height):
        for x in range(width):
            if math.hypot(x - cx, y - cy) <= r and r > 0:
                n += 1
    return n


def brute_grade_counts(plane: np.ndarray) -> dict[float, int]:
    counts = {0.5: 0, 0.75: 0, 1.0: 0}
    h, w = plane.shape
    for y in range(h):
        for x in range(w):
            v = float(plane[y, x])
            if v in counts:
                counts[v] += 1
    return counts


def brute_region_counts(pred_in: np.ndarray, gt_in: np.ndarray) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) by plain loops over boolean region masks."""
    tp = fp = fn = tn = 0
    h, w = pred_in.shape
    for y in range(h):
        for x in range(w):
            p, g = bool(pred_in[y, x]), bool(gt_in[y, x])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def oracle_region_masks(pred_labels: np.ndarray, gt_grade: np.ndarray, region: str):
    """Region membership from first principles (labels 2=ED, 3=ET, 4=NCR)."""
    if region == "WT":
        pred = (pred_labels == 2) | (pred_labels == 3) | (pred_labels == 4)
        gt = gt_grade > 0
    elif region == "TC":
        pred = (pred_labels == 3) | (pred_labels == 4)
        gt = gt_grade >= 0.75
    else:  # ET
        pred = pred_labels == 3
        gt = gt_grade == 0.75
    return pred, gt


def oracle_scores(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Dice / sensitivity / precision with the empty-region conventions."""
    if tp + fn == 0:
        v = 1.0 if fp == 0 else 0.0
        return v, v, v
    dice = 2 * tp / (2 * tp + fp + fn)
    sens = tp / (tp + fn)
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    return dice, sens, prec


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_param_check(
    loss_fn,
    module: torch.nn.Module,
    n_params: int = 20,
    step: float = 1e-3,
    tol: float = 1e-3,
    seed: int = 0,
) -> float:
    """Central finite differences on randomly chosen parameter scalars.

    ``loss_fn()`` must evaluate a scalar from the module's current
    parameters. Relative error is measured against the gradient's largest
    component (vector infinity-norm). Sample points whose +-step window
    crosses a ReLU/maxpool kink are detected by a half-step consistency
    probe and resampled: central differences are undefined there for any
    correct gradient. Returns the worst relative error among the
    ``n_params`` verified points.
    """
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    params = [p for p in module.parameters() if p.requires_grad]
    flat_grads = torch.cat([p.grad.reshape(-1) for p in params])
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    gscale = max(1e-12, float(flat_grads.abs().max()))
    kink_jump = 2e-6 * max(1.0, gscale)
    rng = np.random.default_rng(seed)
    picks = list(rng.permutation(total))

    def fd_at(flat_idx: int, h: float) -> float:
        pi, offset = 0, flat_idx
        while offset >= sizes[pi]:
            offset -= sizes[pi]
            pi += 1
        p = params[pi].reshape(-1)
        orig = float(p[offset])
        p[offset] = orig + h
        f_plus = float(loss_fn())
        p[offset] = orig - h
        f_minus = float(loss_fn())
        p[offset] = orig
        return (f_plus - f_minus) / (2 * h)

    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        for flat_idx in picks:
            if checked >= min(n_params, total):
                break
            flat_idx = int(flat_idx)
            fd = fd_at(flat_idx, step)
            fd_half = fd_at(flat_idx, step / 2)
            if abs(fd - fd_half) > kink_jump:
                skipped += 1
                assert skipped < 20 * n_params, "too many non-differentiable sample points"
                continue
            analytic = float(flat_grads[flat_idx])
            err = abs(fd - analytic) / max(abs(fd), abs(analytic), gscale)
            assert err <= tol, (
                f"param {flat_idx}: analytic {analytic:.6e} vs fd {fd:.6e} (rel {err:.2e})"
            )
            worst = max(worst, err)
            checked += 1
    assert checked >= min(n_params, total)
    return worst


def fd_input_check(
    loss_fn,
    x: torch.Tensor,
    n_pixels: int = 20,
    step: float = 1e-3,
    tol: float = 1e-3,
    seed: int = 0,
) -> float:
    """Central finite differences on randomly chosen input entries of ``x``."""
    x.grad = None
    loss = loss_fn()
    loss.backward()
    grad = x.grad.reshape(-1).clone()
    flat = x.data.reshape(-1)
    rng = np.random.default_rng(seed)
    picks = rng.choice(flat.numel(), size=min(n_pixels, flat.numel()), replace=False)
    worst = 0.0
    with torch.no_grad():
        for idx in picks:
            idx = int(idx)
            orig = float(flat[idx])
            flat[idx] = orig + step
            f_plus = float(loss_fn())
            flat[idx] = orig - step
            f_minus = float(loss_fn())
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2 * step)
            err = rel_err(fd, float(grad[idx]))
            assert err <= tol, f"input {idx}: analytic {grad[idx]:.6e} vs fd {fd:.6e}"
            worst = max(worst, err)
    return worst


def dir_snapshot(root: Path, skip_names: tuple[str, ...] = ()) -> dict[str, bytes]:
    """Relative path -> file bytes, skipping entries whose name matches."""
    out = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        if any(s in path.name for s in skip_names) or any(
            s in part for part in path.relative_to(root).parts[:-1] for s in skip_names
        ):
            continue
        out[str(path.relative_to(root))] = path.read_bytes()
    return out


def assert_dirs_identical(a: Path, b: Path, skip_names: tuple[str, ...] = ()) -> int:
    snap_a = dir_snapshot(a, skip_names)
    snap_b = dir_snapshot(b, skip_names)
    assert snap_a.keys() == snap_b.keys(), (
        f"file sets differ: only in a: {sorted(set(snap_a) - set(snap_b))[:5]}, "
        f"only in b: {sorted(set(snap_b) - set(snap_a))[:5]}"
    )
    for rel in snap_a:
        assert snap_a[rel] == snap_b[rel], f"file {rel} differs between runs"
    return len(snap_a)
