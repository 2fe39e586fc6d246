"""Joint training objective and counting/classification metrics.

The training loss is the plain (unweighted) sum of three terms:

* regression     -- mean squared count error over the rescaled-patch batch
* classification -- cross-entropy of the density classifier, computed on the
                    softmax probabilities clamped to [1e-7, 1 - 1e-7]
* attention      -- binary cross-entropy of each branch saliency map against
                    its crowd-region target, pixel-averaged per branch and
                    then averaged across branches
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError

PROB_EPS = 1e-7


def regression_loss(pred_counts: Tensor, gt_counts: Tensor) -> Tensor:
    """Mean squared error over however many rescaled patches the batch produced."""
    if pred_counts.shape != gt_counts.shape:
        raise ValidationError(
            f"count shapes differ: {tuple(pred_counts.shape)} vs {tuple(gt_counts.shape)}"
        )
    if pred_counts.numel() == 0:
        return torch.zeros((), dtype=pred_counts.dtype, device=pred_counts.device)
    return ((pred_counts - gt_counts) ** 2).mean()


def classification_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Cross-entropy on class probabilities (not logits), batch-averaged.

    ``probs`` is (B, 4) softmax output, ``target`` is (B,) class indices.
    Probabilities are clamped away from 0/1 before the log.
    """
    if probs.ndim != 2:
        raise ValidationError(f"expected (B, C) probabilities, got shape {tuple(probs.shape)}")
    with torch.no_grad():
        rows = probs.sum(dim=1)
        if not torch.allclose(rows, torch.ones_like(rows), atol=1e-4):
            raise ValidationError("class probabilities must sum to 1 per row")
    clamped = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    picked = clamped.gather(1, target.reshape(-1, 1).to(torch.long)).squeeze(1)
    return (-torch.log(picked)).mean()


def attention_loss(per_branch: list[tuple[Tensor, Tensor]]) -> Tensor:
    """BCE of saliency maps vs binary crowd-region targets.

    ``per_branch`` holds one (maps, targets) pair per branch; maps are sigmoid
    outputs in (0, 1), targets are 0/1 of the same shape. The per-branch term
    is the mean over all pixels of that branch's batch; the result is the mean
    of the per-branch terms.
    """
    if not per_branch:
        return torch.zeros(())
    terms = []
    for maps, targets in per_branch:
        if maps.shape != targets.shape:
            raise ValidationError(
                f"saliency map shape {tuple(maps.shape)} != target shape {tuple(targets.shape)}"
            )
        p = maps.clamp(PROB_EPS, 1.0 - PROB_EPS)
        t = targets.to(p.dtype)
        terms.append(-(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean())
    return torch.stack(terms).mean()


@dataclass
class LossBreakdown:
    regression: Tensor
    classification: Tensor
    attention: Tensor

    @property
    def total(self) -> Tensor:
        return self.regression + self.classification + self.attention


def joint_loss(
    pred_counts: Tensor,
    gt_counts: Tensor,
    probs: Tensor,
    class_targets: Tensor,
    sm_pairs: list[tuple[Tensor, Tensor]],
) -> LossBreakdown:
    return LossBreakdown(
        regression=regression_loss(pred_counts, gt_counts),
        classification=classification_loss(probs, class_targets),
        attention=attention_loss(sm_pairs),
    )


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute image-count error."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or len(pred) == 0:
        raise ValidationError("mae expects two equal-length nonempty 1-D arrays")
    return float(np.mean(np.abs(pred - gt)))


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Root mean squared image-count error; always >= MAE on the same data."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or len(pred) == 0:
        raise ValidationError("rmse expects two equal-length nonempty 1-D arrays")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


@dataclass
class ClassifierReport:
    confusion: np.ndarray  # (4, 4) int, rows = ground truth, cols = predicted
    precision: np.ndarray  # (4,)
    recall: np.ndarray  # (4,)
    usage: np.ndarray  # (4,) fraction of patches assigned to each class
    n: int


def classifier_report(gt_labels, pred_labels) -> ClassifierReport:
    gt = np.asarray(gt_labels, dtype=np.int64)
    pred = np.asarray(pred_labels, dtype=np.int64)
    if gt.shape != pred.shape or gt.ndim != 1 or len(gt) == 0:
        raise ValidationError("classifier_report expects two equal-length nonempty 1-D arrays")
    k = 4
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (gt, pred), 1)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    diag = np.diag(confusion)
    precision = np.divide(diag, col, out=np.zeros(k, dtype=np.float64), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(k, dtype=np.float64), where=row > 0)
    return ClassifierReport(
        confusion=confusion,
        precision=precision,
        recall=recall,
        usage=col / len(gt),
        n=len(gt),
    )
