"""Critic estimating whether a relation tuple comes from the joint distribution.

The critic projects both relation vectors with bias-free linear maps,
l2-normalizes them, and turns the temperature-scaled inner product into a
probability against an n/m offset, where n is the number of negatives and m
the dataset cardinality.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
from torch import nn

EPS = 1e-7


def l2_normalize(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """x / max(||x||, eps) along the last dimension."""
    norm = x.norm(dim=-1, keepdim=True).clamp_min(eps)
    return x / norm


def project_normalize(linear: nn.Linear, v: torch.Tensor) -> torch.Tensor:
    """Apply a linear map and l2-normalize the result."""
    if not torch.isfinite(v).all():
        raise ValueError("non-finite relation vector")
    return l2_normalize(linear(v))


class RelationCritic(nn.Module):
    def __init__(self, relation_dim: int = 128, proj_dim: int = 128,
                 tau: float = 0.1, n_negatives: int = 512,
                 dataset_cardinality: int = 1,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if tau <= 0:
            raise ValueError("tau must be positive")
        if n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if dataset_cardinality < 1:
            raise ValueError("dataset_cardinality must be >= 1")
        self.tau = float(tau)
        self.n_negatives = int(n_negatives)
        self.dataset_cardinality = int(dataset_cardinality)
        self.h1 = nn.Linear(relation_dim, proj_dim, bias=False)
        self.h2 = nn.Linear(relation_dim, proj_dim, bias=False)
        for layer in (self.h1, self.h2):
            bound = 1.0 / (layer.in_features ** 0.5)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)

    @property
    def offset(self) -> float:
        return self.n_negatives / self.dataset_cardinality

    def score_from_inner(self, inner: torch.Tensor) -> torch.Tensor:
        # stable sigmoid-like form of exp(s/tau) / (exp(s/tau) + n/m)
        logit = inner / self.tau - math.log(self.offset)
        return torch.sigmoid(logit).clamp(EPS, 1.0 - EPS)

    def forward(self, v_t: torch.Tensor, v_ts: torch.Tensor) -> torch.Tensor:
        """Probability that aligned tuples (v_t, v_ts) are joint samples."""
        a = project_normalize(self.h1, v_t)
        b = project_normalize(self.h2, v_ts)
        return self.score_from_inner((a * b).sum(dim=-1))

    def cross(self, v_t: torch.Tensor, v_ts: torch.Tensor) -> torch.Tensor:
        """Scores for anchors [N, d] against per-anchor negatives [N, M, d]."""
        a = project_normalize(self.h1, v_t)
        b = project_normalize(self.h2, v_ts)
        inner = (a.unsqueeze(1) * b).sum(dim=-1)
        return self.score_from_inner(inner)


def critic_score(critic: RelationCritic, v_t, v_ts) -> torch.Tensor:
    """Score a single relation tuple; accepts RelationVector or raw tensors."""
    vt = v_t if isinstance(v_t, torch.Tensor) else v_t.values
    vts = v_ts if isinstance(v_ts, torch.Tensor) else v_ts.values
    return critic(vt.unsqueeze(0), vts.unsqueeze(0)).squeeze(0)


def mi_lower_bound(critic: RelationCritic, positive_scores) -> float:
    """log(n) plus the mean log critic score over positive tuples."""
    if isinstance(positive_scores, torch.Tensor):
        scores = positive_scores.reshape(-1)
    else:
        scores = torch.as_tensor(list(positive_scores), dtype=torch.float64)
    if scores.numel() == 0:
        raise ValueError("positive_scores must be nonempty")
    return math.log(critic.n_negatives) + scores.log().mean().item()


def critic_nll(critic: RelationCritic, pos_vt: torch.Tensor, pos_vts: torch.Tensor,
               neg_vts: torch.Tensor) -> torch.Tensor:
    """Negative data log likelihood of the critic.

    Expectation form: one positive tuple per anchor plus the anchor's
    negatives [N, M, d], each negative carrying unit weight.
    """
    pos = critic(pos_vt, pos_vts)
    neg = critic.cross(pos_vt, neg_vts)
    return -(pos.log().sum() + (1.0 - neg).log().sum()) / pos.numel()


def fit_critic(critic: RelationCritic, pos_vt: torch.Tensor, pos_vts: torch.Tensor,
               sample_negatives, steps: int = 200, lr: float = 0.05,
               batch_size: int = 512,
               generator: Optional[torch.Generator] = None) -> RelationCritic:
    """Fit the critic on fixed relation pairs by maximizing its likelihood.

    ``sample_negatives(idx)`` must return per-anchor negative relation
    vectors of shape [len(idx), M, d] drawn from the marginal.
    """
    opt = torch.optim.Adam(critic.parameters(), lr=lr)
    count = pos_vt.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, count, (min(batch_size, count),), generator=generator)
        loss = critic_nll(critic, pos_vt[idx], pos_vts[idx], sample_negatives(idx))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return critic
