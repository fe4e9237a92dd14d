"""Training losses: relation contrastive, soft-label distillation, classification.

The combined objective is cls + alpha * kd + beta * rcd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .critic import RelationCritic

PRINTED = "printed"
MEAN = "mean"


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 2.0
    rho: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass
class LossBreakdown:
    cls: float
    kd: float
    rcd: float
    total: float


def rcd_loss_from_scores(pos_scores: torch.Tensor, neg_scores: Optional[torch.Tensor],
                         n_negatives: int, weighting: str = PRINTED) -> torch.Tensor:
    """Relation contrastive loss from critic scores, averaged per positive.

    ``printed`` multiplies the summed negative term by n; ``mean`` weighs
    each negative tuple once (n times the mean over exactly n negatives).
    """
    if pos_scores.numel() == 0:
        raise ValueError("at least one positive tuple is required")
    num_pos = pos_scores.numel()
    loss = -pos_scores.log().sum()
    if neg_scores is not None and neg_scores.numel() > 0:
        neg_term = -(1.0 - neg_scores).log().sum()
        if weighting == PRINTED:
            loss = loss + n_negatives * neg_term
        elif weighting == MEAN:
            loss = loss + n_negatives * neg_term / (neg_scores.numel() / num_pos)
        else:
            raise ValueError(f"unknown negative weighting: {weighting!r}")
    return loss / num_pos


def rcd_loss(critic: RelationCritic, positives: Sequence, negatives: Sequence,
             weighting: str = PRINTED) -> torch.Tensor:
    """Relation contrastive loss over explicit relation tuples."""
    if len(positives) == 0:
        raise ValueError("positives must be nonempty")
    pos_vt = torch.stack([t.v_t.values for t in positives])
    pos_vts = torch.stack([t.v_ts.values for t in positives])
    pos_scores = critic(pos_vt, pos_vts)
    neg_scores = None
    if len(negatives) > 0:
        neg_vt = torch.stack([t.v_t.values for t in negatives])
        neg_vts = torch.stack([t.v_ts.values for t in negatives])
        neg_scores = critic(neg_vt, neg_vts)
    return rcd_loss_from_scores(pos_scores, neg_scores, critic.n_negatives, weighting)


def kd_loss(z_t: torch.Tensor, z_s: torch.Tensor, rho: float) -> torch.Tensor:
    """Temperature-softened cross-entropy between teacher and student logits.

    rho^2 * H(softmax(z_t / rho), softmax(z_s / rho)); batched inputs are
    averaged over rows.
    """
    if z_t.shape != z_s.shape:
        raise ValueError(f"logit shape mismatch: {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    if z_t.shape[-1] < 2:
        raise ValueError("need at least two classes")
    p = F.softmax(z_t / rho, dim=-1)
    log_q = F.log_softmax(z_s / rho, dim=-1)
    ce = -(p * log_q).sum(dim=-1)
    return rho * rho * ce.mean()


def cls_loss(z_s: torch.Tensor, label, mode: str = "cross_entropy",
             margin: float = 0.5, scale: float = 64.0) -> torch.Tensor:
    """Classification loss for student logits (or cosines in arcface mode)."""
    logits = z_s if z_s.dim() == 2 else z_s.unsqueeze(0)
    labels = torch.as_tensor(label).reshape(-1)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise ValueError(f"label out of range [0, {logits.shape[-1]})")
    if mode == "cross_entropy":
        return F.cross_entropy(logits, labels)
    if mode == "arcface":
        # inputs are cosines from a normalized-embedding classifier head
        cos = logits.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
        theta = torch.acos(cos)
        target = F.one_hot(labels, logits.shape[-1]).to(cos.dtype)
        adjusted = torch.cos(theta + margin * target)
        return F.cross_entropy(scale * adjusted, labels)
    raise ValueError(f"unknown classification mode: {mode!r}")


def total_loss(cls: torch.Tensor, kd, rcd, weights: LossWeights) -> LossBreakdown:
    """Combine the three loss terms: cls + alpha * kd + beta * rcd."""
    def val(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    total = val(cls) + weights.alpha * val(kd) + weights.beta * val(rcd)
    return LossBreakdown(cls=val(cls), kd=val(kd), rcd=val(rcd), total=total)
