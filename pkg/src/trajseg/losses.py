"""Two-stage objectives.

Stage 1 (stills): weighted text cross-entropy plus the BCE+DICE mask term.
Stage 2 (videos): the same, with a per-frame presence classification BCE,
and the mask term gated so only frames where the target is actually
present contribute. Ground-truth-absent frames must receive exactly zero
mask-loss gradient; that property is load-bearing and tested.

Mask BCE is evaluated in logit space (see ops.bce_with_logits): with the
clipped-probability form, a few dozen steps at a hot learning rate can
push every pixel past the clamp and freeze the mask branch for good.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, stack
from .errors import InputError, ShapeError
from .ops import bce_loss, bce_with_logits, cross_entropy, dice_loss


@dataclass
class LossWeights:
    text: float = 1.0
    mask: float = 1.0
    cls: float = 0.5
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise InputError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossBreakdown:
    """Scalar term values (unweighted) recorded alongside the total."""

    total: float
    text: float
    cls: float
    bce: float
    dice: float


def _mask_term(mask_logits, mask_gts, weights: LossWeights):
    """Mean over the given frames of bce/dice; returns (term, bce, dice)."""
    bces = [bce_with_logits(p, g) for p, g in zip(mask_logits, mask_gts)]
    dices = [dice_loss(p.sigmoid(), g) for p, g in zip(mask_logits, mask_gts)]
    n = len(bces)
    bce_mean = sum(bces[1:], bces[0]) * (1.0 / n)
    dice_mean = sum(dices[1:], dices[0]) * (1.0 / n)
    return weights.bce * bce_mean + weights.dice * dice_mean, bce_mean, dice_mean


def stage1_loss(text_logits, text_targets, mask_logits, mask_gts, weights: LossWeights):
    """Still-image objective. Returns (total Tensor, LossBreakdown).

    text_logits: (L, V) Tensor over supervised positions (None for pure
    mask samples); mask_logits/mask_gts: parallel per-frame lists, masks
    given as raw logits.
    """
    if len(mask_logits) != len(mask_gts):
        raise ShapeError(f"{len(mask_logits)} mask predictions vs {len(mask_gts)} ground truths")
    total = Tensor(np.zeros(()))
    text_val = 0.0
    if text_logits is not None:
        ce = cross_entropy(text_logits, text_targets)
        total = total + weights.text * ce
        text_val = float(ce.data)
    bce_val = dice_val = 0.0
    if mask_logits:
        term, bce_mean, dice_mean = _mask_term(mask_logits, mask_gts, weights)
        total = total + weights.mask * term
        bce_val, dice_val = float(bce_mean.data), float(dice_mean.data)
    return total, LossBreakdown(float(total.data), text_val, 0.0, bce_val, dice_val)


def stage2_loss(
    text_logits,
    text_targets,
    presence_preds,
    presence_gt,
    mask_logits,
    mask_gts,
    weights: LossWeights,
):
    """Video objective with presence gating.

    presence_preds: per-frame scalar Tensors in (0, 1); presence_gt: 0/1
    per frame. Mask losses are averaged over frames with presence 1 only,
    so absent frames contribute exactly nothing (value and gradient).
    """
    t_frames = len(presence_gt)
    if len(presence_preds) != t_frames:
        raise ShapeError(f"{len(presence_preds)} presence scores for {t_frames} frames")
    if len(mask_logits) != t_frames or len(mask_gts) != t_frames:
        raise ShapeError(f"mask lists must cover all {t_frames} frames")
    gt = np.asarray(presence_gt, dtype=np.float64)
    if not set(np.unique(gt)) <= {0.0, 1.0}:
        raise InputError("presence ground truth must be 0/1")

    total = Tensor(np.zeros(()))
    text_val = 0.0
    if text_logits is not None:
        ce = cross_entropy(text_logits, text_targets)
        total = total + weights.text * ce
        text_val = float(ce.data)

    cls = bce_loss(stack(list(presence_preds)), gt)
    total = total + weights.cls * cls

    present = [t for t in range(t_frames) if gt[t] == 1.0]
    bce_val = dice_val = 0.0
    if present:
        term, bce_mean, dice_mean = _mask_term(
            [mask_logits[t] for t in present], [mask_gts[t] for t in present], weights
        )
        total = total + weights.mask * term
        bce_val, dice_val = float(bce_mean.data), float(dice_mean.data)
    return total, LossBreakdown(float(total.data), text_val, float(cls.data), bce_val, dice_val)
