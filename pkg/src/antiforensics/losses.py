"""Objective terms for concealer and supervisor training.

All functions take NCHW tensors and reduce each term per image before
averaging over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0  # self-supervised term in the concealer objective
    beta: float = 3.0  # adversarial term in the concealer objective
    lam: float = 0.5  # supervisor update weight

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) <= 0:
            raise ValueError("loss weights must be strictly positive")


def _per_image(x):
    return x.reshape(x.shape[0], -1) if x.dim() == 4 else x.reshape(1, -1)


def make_pseudo_label(delta, mask):
    """Mask-gated perturbation, detached so it acts as a fixed target."""
    return (delta * mask).detach()


# How the per-image sums inside the self-supervised terms are normalised:
#   "mixed": pretext averaged over entries, hinge a raw L2 norm (default)
#   "mean":  both averaged over entries (hinge becomes the RMS of delta)
#   "sum":   both raw (pretext summed over entries, hinge a raw L2 norm)
NORMALIZATIONS = ("mixed", "mean", "sum")


def _check_normalization(normalization):
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


def pretext_loss(delta, mask, normalization="mixed"):
    """Absolute gap between the perturbation and its mask-gated copy.

    Only pristine pixels contribute, so minimising it pushes the
    perturbation out of untampered regions.
    """
    _check_normalization(normalization)
    target = make_pseudo_label(delta, mask)
    gap = _per_image((target - delta).abs())
    return (gap.sum(dim=1) if normalization == "sum" else gap.mean(dim=1)).mean()


def hinge_loss(delta, normalization="mixed"):
    """Per-image L2 norm of the perturbation, averaged over the batch.

    With normalization="mean" the squared entries are averaged rather than
    summed, i.e. the per-image RMS.
    """
    _check_normalization(normalization)
    flat = _per_image(delta)
    # vector_norm has a zero subgradient at 0 where sqrt(sum) would give NaN
    norms = torch.linalg.vector_norm(flat, dim=1)
    if normalization == "mean":
        norms = norms / flat.shape[1] ** 0.5
    return norms.mean()


def self_loss(delta, mask, normalization="mixed"):
    return pretext_loss(delta, mask, normalization) + hinge_loss(delta, normalization)


def bce(pred, gt):
    """Mean per-pixel binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    gt = gt.to(p.dtype)
    per_pixel = -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p))
    return _per_image(per_pixel).mean(dim=1).mean()


def adversarial_loss(pred, gt):
    """Negated BCE; always <= 0."""
    return -bce(pred, gt)


def concealer_total(self_val, adv_val, w: LossWeights = LossWeights()):
    return w.alpha * self_val + w.beta * adv_val


def supervisor_total(adv_val, w: LossWeights = LossWeights()):
    return -w.lam * adv_val
