"""Loss functions for mask generation, inpainting, and adversarial training.

The pixel and content losses are L1 norms ("absolute sum"); the
adversarial objective is mean(D(real)) + mean(1 - D(fake)), maximized by
the discriminator and minimized by the generator. It is bounded because
the discriminator ends in a sigmoid; no logarithms are applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import OutOfRange, ShapeMismatch
from .networks import NetworkHandle

REDUCTIONS = ("sum", "mean")


@dataclass
class LossWeights:
    """Weights for the combined inpainting objective.

    The four ablation presets (pix; pix+adv; pix+cont; pix+adv+cont) are
    expressed by zeroing weights, no code changes.
    """

    w_pix: float = 1.0
    w_cont: float = 0.1
    w_adv: float = 0.01
    reduction: str = "mean"

    def __post_init__(self):
        if min(self.w_pix, self.w_cont, self.w_adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_pix == self.w_cont == self.w_adv == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Absolute-sum distance (or its mean, for batch-size-stable training)."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    return diff.sum() if reduction == "sum" else diff.mean()


def content_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    psi: NetworkHandle,
    reduction: str = "sum",
) -> torch.Tensor:
    """L1 distance between frozen-backbone feature maps."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(target.shape)}")
    return l1_loss(psi(pred), psi(target), reduction=reduction)


def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean(D(real)) + mean(1 - D(fake)); D maximizes, G minimizes."""
    for name, vals in (("d_real", d_real), ("d_fake", d_fake)):
        if (vals < 0).any() or (vals > 1).any():
            raise OutOfRange(f"{name} outside [0, 1]; discriminator must be sigmoid-bounded")
    return d_real.mean() + (1.0 - d_fake).mean()


def generator_adversarial_term(d_fake: torch.Tensor) -> torch.Tensor:
    """The generator-facing part of the adversarial objective."""
    if (d_fake < 0).any() or (d_fake > 1).any():
        raise OutOfRange("d_fake outside [0, 1]")
    return (1.0 - d_fake).mean()


def total_inpaint_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    d_fake: torch.Tensor | None,
    psi: NetworkHandle | None,
    w: LossWeights,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted generator objective plus a per-term breakdown for logging."""
    zero = pred.new_zeros(())
    pix = l1_loss(pred, target, w.reduction) if w.w_pix > 0 else zero
    cont = content_loss(pred, target, psi, w.reduction) if w.w_cont > 0 and psi is not None else zero
    adv = generator_adversarial_term(d_fake) if w.w_adv > 0 and d_fake is not None else zero
    total = w.w_pix * pix + w.w_cont * cont + w.w_adv * adv
    breakdown = {
        "pix": float(pix.detach()),
        "cont": float(cont.detach()),
        "adv": float(adv.detach()),
        "weighted_pix": float(w.w_pix * pix.detach()),
        "weighted_cont": float(w.w_cont * cont.detach()),
        "weighted_adv": float(w.w_adv * adv.detach()),
    }
    return total, breakdown
