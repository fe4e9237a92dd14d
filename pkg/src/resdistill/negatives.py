"""FIFO bank of recent embeddings and negative tuple construction.

The bank keeps the most recent records up to a fixed capacity, removing the
oldest when a new one arrives. Negatives are drawn uniformly without
replacement, excluding the anchor's id (unsupervised) or the anchor's label
(supervised).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .relation import (Embedding, RelationHead, RelationVector, relate,
                       STUDENT, TEACHER)

UNSUPERVISED = "unsupervised"
SUPERVISED = "supervised"


class InsufficientNegatives(RuntimeError):
    def __init__(self, needed: int, pool_size: int):
        super().__init__(f"need {needed} negatives but eligible pool has {pool_size}")
        self.needed = needed
        self.pool_size = pool_size


@dataclass
class BankRecord:
    teacher_embedding: torch.Tensor
    student_embedding: torch.Tensor
    label: Optional[int]
    sample_id: int
    insertion_step: int


@dataclass
class SamplingPolicy:
    mode: str = SUPERVISED
    n: int = 512

    def __post_init__(self):
        if self.mode not in (UNSUPERVISED, SUPERVISED):
            raise ValueError(f"unknown sampling mode: {self.mode!r}")
        if self.n < 1:
            raise ValueError("n must be positive")


class NegativeBank:
    """Fixed-capacity FIFO of (teacher, student, label, id, step) records."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)
        self._step = 0

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> Tuple[BankRecord, ...]:
        return tuple(self._entries)

    def push(self, teacher_embedding: torch.Tensor, student_embedding: torch.Tensor,
             sample_id: int, label: Optional[int] = None) -> BankRecord:
        if not (torch.isfinite(teacher_embedding).all()
                and torch.isfinite(student_embedding).all()):
            raise ValueError("non-finite embedding pushed to bank")
        # stale student embeddings are constants in the gradient graph
        record = BankRecord(teacher_embedding=teacher_embedding.detach(),
                            student_embedding=student_embedding.detach(),
                            label=label, sample_id=sample_id,
                            insertion_step=self._step)
        self._entries.append(record)
        self._step += 1
        return record

    def eligible(self, policy: SamplingPolicy, anchor_id: int,
                 anchor_label: Optional[int]) -> List[BankRecord]:
        if policy.mode == UNSUPERVISED:
            return [r for r in self._entries if r.sample_id != anchor_id]
        if anchor_label is None:
            raise ValueError("supervised sampling requires an anchor label")
        return [r for r in self._entries if r.label != anchor_label]


def sample_negatives(bank: NegativeBank, policy: SamplingPolicy,
                     anchor_id: int, anchor_label: Optional[int],
                     rng: np.random.Generator,
                     with_replacement: bool = False) -> List[BankRecord]:
    """Draw policy.n eligible records uniformly without replacement."""
    pool = bank.eligible(policy, anchor_id, anchor_label)
    if len(pool) < policy.n and not with_replacement:
        raise InsufficientNegatives(policy.n, len(pool))
    if len(pool) == 0:
        raise InsufficientNegatives(policy.n, 0)
    idx = rng.choice(len(pool), size=policy.n, replace=with_replacement or len(pool) < policy.n)
    return [pool[i] for i in idx]


@dataclass
class RelationTuple:
    """A (teacher-space, cross-space) relation pair tagged joint or marginal."""

    v_t: RelationVector
    v_ts: RelationVector
    positive: bool


def build_tuples(head_tt: RelationHead, head_ts: RelationHead,
                 anchors: Sequence[Embedding], partners_teacher: Sequence[Embedding],
                 partners_student: Sequence[Embedding],
                 negatives: Sequence[Sequence[BankRecord]]):
    """Build joint (b=1) and marginal (b=0) relation tuples for a batch.

    Each anchor i pairs v_t[i,j] with v_ts[i,j] for its partner j (joint) and
    with v_ts[i,k] for every sampled bank record k (marginal). A bank record
    whose id equals the partner's is skipped.
    """
    if not (len(anchors) == len(partners_teacher) == len(partners_student) == len(negatives)):
        raise ValueError("anchors, partners and negatives must be row-aligned")
    positives: List[RelationTuple] = []
    negs: List[RelationTuple] = []
    for anchor, pt, ps, records in zip(anchors, partners_teacher, partners_student, negatives):
        v_t = relate(head_tt, anchor, pt)
        v_ts = relate(head_ts, anchor, ps)
        positives.append(RelationTuple(v_t=v_t, v_ts=v_ts, positive=True))
        for rec in records:
            if rec.sample_id == ps.sample_id:
                continue
            neg_emb = Embedding(values=rec.student_embedding, source=STUDENT,
                                sample_id=rec.sample_id, label=rec.label)
            negs.append(RelationTuple(v_t=v_t, v_ts=relate(head_ts, anchor, neg_emb),
                                      positive=False))
    return positives, negs
