"""Training loops for the mask generators, the inpainting GAN, and the
segmentation U-Net, with periodic checkpointing and best-validation
selection.

All loops are deterministic given (seed, config, data): parameter init,
shuffling, and optimizer state derive from the config seed alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core_data import DatasetManifest, SliceRecord
from .errors import EmptyDataset, NoCheckpoints
from .geometry import binarize, brain_support, render_circles, render_disk, simplify_to_circles
from .losses import LossWeights, adversarial_loss, l1_loss, total_inpaint_loss
from .networks import (
    NetworkHandle,
    build_d_inpaint,
    build_feature_extractor,
    build_g_binary,
    build_g_grade,
    build_g_inpaint,
    build_unet_seg,
    load_checkpoint,
    save_checkpoint,
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    checkpoint_every: int = 10
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    chosen_epoch: int | None = None
    wall_time_s: float = 0.0
    extra_curves: dict[str, list[float]] = field(default_factory=dict)

    def curves_dict(self) -> dict:
        # wall time is intentionally not serialized: artifact files must be
        # byte-identical across reruns
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "chosen_epoch": self.chosen_epoch,
            "extra_curves": self.extra_curves,
        }


def _records_for(manifest: DatasetManifest, split: str) -> list[SliceRecord]:
    """Records of a split, falling back to all records when absent."""
    ids = manifest.split_ids(split)
    if ids:
        return [manifest.load_record(rid) for rid in ids]
    return list(manifest.iter_all())


def tumor_records(manifest: DatasetManifest, split: str) -> list[SliceRecord]:
    return [
        r
        for r in _records_for(manifest, split)
        if r.grade_mask is not None and not r.grade_mask.is_empty()
    ]


def _checkpoint_epochs(epochs: int, every: int) -> set[int]:
    marks = {e for e in range(every, epochs + 1, every)}
    if epochs > 0:
        marks.add(epochs)  # force-save the final epoch
    return marks


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _mask_pair_binary(rec: SliceRecord) -> tuple[np.ndarray, np.ndarray]:
    grade = rec.grade_mask
    c = simplify_to_circles(grade)
    support = brain_support(rec.images)
    disk = render_disk(c.cx, c.cy, c.r1, grade.height, grade.width)
    target = binarize(grade)
    return np.stack([disk.plane, support.plane]), target.plane[None]


def _mask_pair_grade(rec: SliceRecord) -> tuple[np.ndarray, np.ndarray]:
    grade = rec.grade_mask
    c = simplify_to_circles(grade)
    circles = render_circles(c, grade.height, grade.width)
    binary = binarize(grade)
    return np.stack([circles.plane, binary.plane]), grade.plane[None]


def _stack_pairs(records, pair_fn) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = zip(*[pair_fn(r) for r in records])
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))


def _eval_l1(net, X, Y, reduction: str, batch_size: int) -> float:
    net.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            xb, yb = X[start : start + batch_size], Y[start : start + batch_size]
            loss = l1_loss(net(xb), yb, reduction=reduction)
            total += float(loss) * (len(xb) if reduction == "mean" else 1.0)
            n += len(xb)
    return total / max(n, 1)


def _train_mask_net(build_fn, pair_fn, data, cfg, out_dir, name):
    train = tumor_records(data, "train")
    if not train:
        raise EmptyDataset("no tumor-bearing training records")
    val = tumor_records(data, "val") or train
    size = train[0].images.height

    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    net = build_fn(size, seed=cfg.seed)
    if cfg.epochs == 0:
        return net, TrainReport(wall_time_s=time.perf_counter() - t0)

    X, Y = _stack_pairs(train, pair_fn)
    Xv, Yv = _stack_pairs(val, pair_fn)
    opt = torch.optim.Adam(net.module.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    rng = np.random.default_rng(cfg.seed)
    reduction = cfg.loss_weights.reduction
    marks = _checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)

    report = TrainReport()
    checkpoints = []
    for epoch in range(1, cfg.epochs + 1):
        net.module.train()
        total, n = 0.0, 0
        for idx in _batches(rng, len(X), cfg.batch_size):
            xb, yb = X[idx], Y[idx]
            loss = l1_loss(net(xb), yb, reduction=reduction)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * (len(idx) if reduction == "mean" else 1.0)
            n += len(idx)
        report.train_loss.append(total / n)
        vloss = _eval_l1(net.module, Xv, Yv, reduction, cfg.batch_size)
        report.val_loss.append(vloss)
        if epoch in marks:
            checkpoints.append({"epoch": epoch, "val_loss": vloss, "state": net.clone_state()})
            if out_dir is not None:
                ckdir = Path(out_dir) / "checkpoints"
                ckdir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(net, ckdir / f"{name}_ep{epoch:04d}.ckpt", epoch, vloss)

    best = min(checkpoints, key=lambda c: c["val_loss"])
    net.load_state(best["state"])
    report.chosen_epoch = best["epoch"]
    report.wall_time_s = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(net, Path(out_dir) / f"{name}.ckpt", best["epoch"], best["val_loss"])
    return net, report


def train_g_binary(data: DatasetManifest, cfg: TrainConfig, out_dir=None):
    """Train the binary-mask generator on (outer disk, brain shape) pairs."""
    return _train_mask_net(build_g_binary, _mask_pair_binary, data, cfg, out_dir, "g_binary")


def train_g_grade(data: DatasetManifest, cfg: TrainConfig, out_dir=None):
    """Train the grade generator on (grade-encoded circles, binary mask) pairs."""
    return _train_mask_net(build_g_grade, _mask_pair_grade, data, cfg, out_dir, "g_grade")


def _inpaint_tensors(records):
    imgs = torch.from_numpy(np.stack([r.images.data for r in records]))
    grade = torch.from_numpy(np.stack([r.grade_mask.plane[None] for r in records]))
    binary = torch.from_numpy(np.stack([binarize(r.grade_mask).plane[None] for r in records]))
    return imgs, grade, binary


def _composite(raw, imgs, binary):
    return torch.where(binary.bool().expand_as(imgs), raw, imgs)


def _eval_inpaint(g_net, psi, imgs, grade, binary, w: LossWeights, batch_size: int) -> float:
    """Validation loss: pixel + content terms (the adversarial term depends
    on the discriminator's state and is excluded from model selection)."""
    g_net.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(imgs), batch_size):
            xb, gb, mb = (
                imgs[start : start + batch_size],
                grade[start : start + batch_size],
                binary[start : start + batch_size],
            )
            x5 = torch.cat([xb * (1.0 - mb), gb], dim=1)
            fake = _composite(g_net(x5, gb), xb, mb)
            loss = w.w_pix * l1_loss(fake, xb, w.reduction)
            if w.w_cont > 0 and psi is not None:
                loss = loss + w.w_cont * l1_loss(psi(fake), psi(xb), w.reduction)
            total += float(loss) * (len(xb) if w.reduction == "mean" else 1.0)
            n += len(xb)
    return total / max(n, 1)


def train_inpaint(
    data: DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
    feature_extractor: NetworkHandle | None = None,
):
    """Adversarial training: one discriminator step, then one generator step
    per batch. Generator outputs are composited into the source image
    (only the masked hole is synthesized) before loss and discrimination.
    """
    train = tumor_records(data, "train")
    if not train:
        raise EmptyDataset("no tumor-bearing training records")
    val = tumor_records(data, "val") or train
    size = train[0].images.height
    w = cfg.loss_weights

    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    g_net = build_g_inpaint(size, seed=cfg.seed)
    d_net = build_d_inpaint(size, seed=cfg.seed + 1)
    psi = feature_extractor
    if psi is None and w.w_cont > 0:
        psi = build_feature_extractor("fixed_random", seed=cfg.seed)
    if cfg.epochs == 0:
        return g_net, d_net, TrainReport(wall_time_s=time.perf_counter() - t0)

    imgs, grade, binary = _inpaint_tensors(train)
    vi, vg, vb = _inpaint_tensors(val)
    opt_g = torch.optim.Adam(g_net.module.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(d_net.module.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    rng = np.random.default_rng(cfg.seed)
    marks = _checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)

    report = TrainReport(extra_curves={"pix": [], "cont": [], "adv": []})
    checkpoints = []
    for epoch in range(1, cfg.epochs + 1):
        g_net.module.train()
        d_net.module.train()
        sums = {"total": 0.0, "pix": 0.0, "cont": 0.0, "adv": 0.0}
        n = 0
        for idx in _batches(rng, len(imgs), cfg.batch_size):
            xb, gb, mb = imgs[idx], grade[idx], binary[idx]
            x5 = torch.cat([xb * (1.0 - mb), gb], dim=1)
            fake = _composite(g_net(x5, gb), xb, mb)

            d_fake_for_g = None
            if w.w_adv > 0:
                d_real = d_net(torch.cat([xb, gb], dim=1))
                d_fake = d_net(torch.cat([fake.detach(), gb], dim=1))
                d_loss = -adversarial_loss(d_real, d_fake)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_fake_for_g = d_net(torch.cat([fake, gb], dim=1))

            total, terms = total_inpaint_loss(fake, xb, d_fake_for_g, psi, w)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            k = len(idx) if w.reduction == "mean" else 1.0
            sums["total"] += float(total.detach()) * k
            for key in ("pix", "cont", "adv"):
                sums[key] += terms[key] * k
            n += len(idx)

        report.train_loss.append(sums["total"] / n)
        for key in ("pix", "cont", "adv"):
            report.extra_curves[key].append(sums[key] / n)
        vloss = _eval_inpaint(g_net.module, psi, vi, vg, vb, w, cfg.batch_size)
        report.val_loss.append(vloss)
        if epoch in marks:
            checkpoints.append(
                {
                    "epoch": epoch,
                    "val_loss": vloss,
                    "state": g_net.clone_state(),
                    "d_state": d_net.clone_state(),
                }
            )
            if out_dir is not None:
                ckdir = Path(out_dir) / "checkpoints"
                ckdir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(g_net, ckdir / f"g_inpaint_ep{epoch:04d}.ckpt", epoch, vloss)

    best = min(checkpoints, key=lambda c: c["val_loss"])
    g_net.load_state(best["state"])
    d_net.load_state(best["d_state"])
    report.chosen_epoch = best["epoch"]
    report.wall_time_s = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(g_net, Path(out_dir) / "g_inpaint.ckpt", best["epoch"], best["val_loss"])
        save_checkpoint(d_net, Path(out_dir) / "d_inpaint.ckpt", best["epoch"], best["val_loss"])
    return g_net, d_net, report


# background and non-tumor dominate the pixel count; tumor classes are
# upweighted so small structures are not swallowed by the class imbalance
SEG_CLASS_WEIGHTS = (1.0, 1.0, 8.0, 8.0, 8.0)


def segmentation_labels(rec: SliceRecord) -> np.ndarray:
    """Exclusive 5-class label map: background, non-tumor, ED, ET, NCR."""
    grade = rec.grade_mask.plane if rec.grade_mask is not None else 0.0 * rec.images.data[0]
    support = brain_support(rec.images).plane
    labels = np.zeros(grade.shape, dtype=np.int64)
    labels[(support > 0) & (grade == 0)] = 1
    labels[grade == 0.5] = 2
    labels[grade == 0.75] = 3
    labels[grade == 1.0] = 4
    return labels


def _seg_tensors(records):
    X = torch.from_numpy(np.stack([r.images.data for r in records]))
    Y = torch.from_numpy(np.stack([segmentation_labels(r) for r in records]))
    return X, Y


def _eval_seg(net, X, Y, batch_size: int) -> float:
    net.eval()
    weight = torch.tensor(SEG_CLASS_WEIGHTS)
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            xb, yb = X[start : start + batch_size], Y[start : start + batch_size]
            loss = F.cross_entropy(net(xb, pre_activation=True), yb, weight=weight)
            total += float(loss) * len(xb)
            n += len(xb)
    return total / max(n, 1)


def train_segmentation(
    data: DatasetManifest,
    cfg: TrainConfig,
    out_dir=None,
    extra_records: list[SliceRecord] | None = None,
):
    """Train the 5-class segmentation U-Net with pixelwise cross-entropy.

    ``extra_records`` (e.g. synthesized slices) are appended to the
    training set; validation and selection use the manifest's val split.
    The loss is pixelwise cross-entropy with fixed class weights.
    """
    train = [r for r in _records_for(data, "train") if r.grade_mask is not None]
    if extra_records:
        train = train + [r for r in extra_records if r.grade_mask is not None]
    if not train:
        raise EmptyDataset("no segmentation training records with grade masks")
    val = [r for r in _records_for(data, "val") if r.grade_mask is not None] or train
    size = train[0].images.height

    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    net = build_unet_seg(size, seed=cfg.seed)
    if cfg.epochs == 0:
        return net, TrainReport(wall_time_s=time.perf_counter() - t0)

    X, Y = _seg_tensors(train)
    Xv, Yv = _seg_tensors(val)
    opt = torch.optim.Adam(net.module.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    rng = np.random.default_rng(cfg.seed)
    marks = _checkpoint_epochs(cfg.epochs, cfg.checkpoint_every)

    weight = torch.tensor(SEG_CLASS_WEIGHTS)
    report = TrainReport()
    checkpoints = []
    for epoch in range(1, cfg.epochs + 1):
        net.module.train()
        total, n = 0.0, 0
        for idx in _batches(rng, len(X), cfg.batch_size):
            xb, yb = X[idx], Y[idx]
            loss = F.cross_entropy(net(xb, pre_activation=True), yb, weight=weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        report.train_loss.append(total / n)
        vloss = _eval_seg(net.module, Xv, Yv, cfg.batch_size)
        report.val_loss.append(vloss)
        if epoch in marks:
            checkpoints.append({"epoch": epoch, "val_loss": vloss, "state": net.clone_state()})
            if out_dir is not None:
                ckdir = Path(out_dir) / "checkpoints"
                ckdir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(net, ckdir / f"unet_seg_ep{epoch:04d}.ckpt", epoch, vloss)

    best = min(checkpoints, key=lambda c: c["val_loss"])
    net.load_state(best["state"])
    report.chosen_epoch = best["epoch"]
    report.wall_time_s = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(net, Path(out_dir) / "unet_seg.ckpt", best["epoch"], best["val_loss"])
    return net, report


def validation_loss(handle: NetworkHandle, validation: DatasetManifest, cfg: TrainConfig | None = None) -> float:
    """Kind-appropriate validation loss of a network on a manifest's val split."""
    cfg = cfg or TrainConfig()
    w = cfg.loss_weights
    if handle.kind in ("g_binary", "g_grade"):
        recs = tumor_records(validation, "val") or tumor_records(validation, "train")
        if not recs:
            raise EmptyDataset("no tumor-bearing validation records")
        pair_fn = _mask_pair_binary if handle.kind == "g_binary" else _mask_pair_grade
        X, Y = _stack_pairs(recs, pair_fn)
        return _eval_l1(handle.module, X, Y, w.reduction, cfg.batch_size)
    if handle.kind == "g_inpaint":
        recs = tumor_records(validation, "val") or tumor_records(validation, "train")
        if not recs:
            raise EmptyDataset("no tumor-bearing validation records")
        psi = build_feature_extractor("fixed_random", seed=cfg.seed) if w.w_cont > 0 else None
        vi, vg, vb = _inpaint_tensors(recs)
        return _eval_inpaint(handle.module, psi, vi, vg, vb, w, cfg.batch_size)
    if handle.kind == "unet_seg":
        recs = [r for r in _records_for(validation, "val") if r.grade_mask is not None]
        if not recs:
            raise EmptyDataset("no validation records with grade masks")
        X, Y = _seg_tensors(recs)
        return _eval_seg(handle.module, X, Y, cfg.batch_size)
    raise ValueError(f"no validation loss defined for kind {handle.kind!r}")


def select_best(checkpoints: list, validation: DatasetManifest, cfg: TrainConfig | None = None) -> NetworkHandle:
    """Return the checkpoint with the lowest validation loss (ties: earliest).

    ``checkpoints`` may hold file paths or NetworkHandle objects.
    """
    if not checkpoints:
        raise NoCheckpoints("empty checkpoint list")
    handles = []
    for item in checkpoints:
        if isinstance(item, NetworkHandle):
            handles.append(item)
        else:
            handle, _ = load_checkpoint(item)
            handles.append(handle)
    losses = [validation_loss(h, validation, cfg) for h in handles]
    return handles[int(np.argmin(losses))]


def discriminator_accuracy(d_net: NetworkHandle, real5: torch.Tensor, fake5: torch.Tensor) -> float:
    """Fraction of correct real/fake calls at the 0.5 threshold."""
    d_net.module.eval()
    with torch.no_grad():
        d_real = d_net(real5)
        d_fake = d_net(fake5)
    correct = float((d_real > 0.5).sum() + (d_fake <= 0.5).sum())
    return correct / (len(d_real) + len(d_fake))
