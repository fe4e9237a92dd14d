"""Learnable relation heads mapping a pair of embeddings to a relation vector.

Two heads exist: one relating two teacher embeddings (teacher space) and one
relating a teacher embedding to a student embedding (cross-resolution space).
Each head applies a separate bias-free linear map to both inputs, rectifies
the elementwise difference and projects it with an affine output layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

TEACHER = "teacher"
STUDENT = "student"

TEACHER_TEACHER = "teacher_teacher"
TEACHER_STUDENT = "teacher_student"


@dataclass
class Embedding:
    """Feature vector produced by a backbone for one image."""

    values: torch.Tensor
    source: str
    sample_id: int
    label: Optional[int] = None

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ValueError("embedding values must be a 1-D vector")
        if not torch.isfinite(self.values).all():
            raise ValueError("embedding contains non-finite entries")
        if self.source not in (TEACHER, STUDENT):
            raise ValueError(f"unknown embedding source: {self.source!r}")


@dataclass
class RelationVector:
    """Vector encoding the relation between an anchor and another sample."""

    values: torch.Tensor
    space: str
    anchor_id: int
    other_id: int


class RelationHead(nn.Module):
    """Two linear layers around a rectifier, applied to transformed differences.

    The per-input maps are bias-free so that matched inputs reduce to the
    head's image of the zero vector; the output map carries a bias.
    """

    def __init__(self, embed_dim: int = 512, out_dim: int = 128,
                 hidden_dim: Optional[int] = None, space: str = TEACHER_TEACHER,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if space not in (TEACHER_TEACHER, TEACHER_STUDENT):
            raise ValueError(f"unknown relation space: {space!r}")
        hidden_dim = out_dim if hidden_dim is None else hidden_dim
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.hidden_dim = hidden_dim
        self.space = space
        self.map_anchor = nn.Linear(embed_dim, hidden_dim, bias=False)
        self.map_other = nn.Linear(embed_dim, hidden_dim, bias=False)
        self.project = nn.Linear(hidden_dim, out_dim, bias=True)
        self._init_parameters(generator)

    def _init_parameters(self, generator: Optional[torch.Generator]):
        # fan-in-scaled uniform, reproducible under an explicit generator
        for layer in (self.map_anchor, self.map_other, self.project):
            bound = 1.0 / (layer.in_features ** 0.5)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                if layer.bias is not None:
                    layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, anchors: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
        """Relation vectors for row-aligned batches of shape [N, embed_dim]."""
        diff = self.map_anchor(anchors) - self.map_other(others)
        return self.project(torch.relu(diff))

    def cross(self, anchors: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
        """All-pairs relation vectors: [N, d_e] x [M, d_e] -> [N, M, out_dim]."""
        diff = self.map_anchor(anchors).unsqueeze(1) - self.map_other(others).unsqueeze(0)
        return self.project(torch.relu(diff))

    def per_anchor(self, anchors: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
        """Row-grouped relation vectors: [N, d_e] x [N, M, d_e] -> [N, M, out_dim]."""
        diff = self.map_anchor(anchors).unsqueeze(1) - self.map_other(others)
        return self.project(torch.relu(diff))

    def expected_sources(self) -> tuple:
        if self.space == TEACHER_TEACHER:
            return TEACHER, TEACHER
        return TEACHER, STUDENT


def _check_pair(head: RelationHead, e_i: Embedding, e_j: Embedding):
    if e_i.values.numel() != head.embed_dim or e_j.values.numel() != head.embed_dim:
        raise ValueError(
            f"embedding dim mismatch: head expects {head.embed_dim}, "
            f"got {e_i.values.numel()} and {e_j.values.numel()}")
    want_i, want_j = head.expected_sources()
    if e_i.source != want_i or e_j.source != want_j:
        raise ValueError(
            f"source pairing ({e_i.source}, {e_j.source}) invalid for "
            f"{head.space} head, expected ({want_i}, {want_j})")


def relate(head: RelationHead, e_i: Embedding, e_j: Embedding) -> RelationVector:
    """Relation vector between an anchor embedding and another embedding."""
    _check_pair(head, e_i, e_j)
    values = head(e_i.values.unsqueeze(0), e_j.values.unsqueeze(0)).squeeze(0)
    return RelationVector(values=values, space=head.space,
                          anchor_id=e_i.sample_id, other_id=e_j.sample_id)


def relate_batch(head: RelationHead, anchors: Sequence[Embedding],
                 others: Sequence[Embedding]) -> list:
    """Elementwise relate() over two row-aligned embedding lists."""
    if len(anchors) != len(others):
        raise ValueError(f"length mismatch: {len(anchors)} anchors vs {len(others)} others")
    return [relate(head, a, b) for a, b in zip(anchors, others)]
