"""Evaluation protocols: top-1, pair verification, linear probe, retrieval.

All protocols are deterministic over frozen models; scores use cosine
similarity on backbone embeddings.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import PairedSample, restore_for_student


def student_inputs(samples: Sequence[PairedSample], input_res: int,
                   input_mode: str) -> torch.Tensor:
    return torch.stack([restore_for_student(s.x_l, input_res, input_mode)
                        for s in samples])


def batched_forward(model, x: torch.Tensor, batch: int = 256):
    embs, logits = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(x), batch):
            e, z = model(x[i:i + batch])
            embs.append(e)
            logits.append(z)
    return torch.cat(embs), torch.cat(logits)


def top1(model, x: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction of argmax-correct predictions."""
    if len(x) == 0:
        raise ValueError("empty dataset")
    _, logits = batched_forward(model, x)
    return float((logits.argmax(dim=-1) == labels).sum().item()) / len(x)


@dataclass
class VerificationReport:
    accuracy: float
    threshold: float
    pos_scores: np.ndarray
    neg_scores: np.ndarray
    expectation_margin: float
    histogram_intersection: float
    bins: int = 100

    def to_text(self) -> str:
        return "\n".join([
            f"accuracy: {self.accuracy}",
            f"threshold: {self.threshold}",
            f"expectation_margin: {self.expectation_margin}",
            f"histogram_intersection: {self.histogram_intersection}",
            f"positives: {len(self.pos_scores)}",
            f"negatives: {len(self.neg_scores)}",
            f"bins: {self.bins}",
        ]) + "\n"

    def write_scores_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score", "same"])
            for s in self.pos_scores:
                writer.writerow([repr(float(s)), 1])
            for s in self.neg_scores:
                writer.writerow([repr(float(s)), 0])


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(dim=-1)


def best_threshold(pos: np.ndarray, neg: np.ndarray) -> Tuple[float, float]:
    """Accuracy-maximizing threshold for the rule `same iff score > t`.

    Candidates are midpoints between consecutive distinct sorted scores plus
    sentinels outside the score range; ties resolve to the lowest threshold.
    """
    scores = np.sort(np.unique(np.concatenate([pos, neg])))
    candidates = [scores[0] - 1.0]
    candidates += list((scores[:-1] + scores[1:]) / 2.0)
    candidates.append(scores[-1] + 1.0)
    total = len(pos) + len(neg)
    best_acc, best_t = -1.0, candidates[0]
    for t in candidates:
        acc = ((pos > t).sum() + (neg <= t).sum()) / total
        if acc > best_acc:
            best_acc, best_t = float(acc), float(t)
    return best_t, best_acc


def score_statistics(pos: np.ndarray, neg: np.ndarray, bins: int = 100):
    """Expectation margin and histogram intersection over [-1, 1]."""
    margin = float(pos.mean() - neg.mean())
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hp, _ = np.histogram(pos, bins=edges)
    hn, _ = np.histogram(neg, bins=edges)
    hp = hp / max(hp.sum(), 1)
    hn = hn / max(hn.sum(), 1)
    return margin, float(np.minimum(hp, hn).sum())


def verify_pairs(embeddings: Dict[int, torch.Tensor],
                 pairs: Iterable[Tuple[int, int, bool]],
                 bins: int = 100) -> VerificationReport:
    """Cosine verification with an exhaustive threshold sweep."""
    pos, neg = [], []
    for id_a, id_b, same in pairs:
        for sid in (id_a, id_b):
            if sid not in embeddings:
                raise KeyError(f"no embedding for sample id {sid}")
        score = float(cosine(embeddings[id_a], embeddings[id_b]))
        (pos if same else neg).append(score)
    if not pos or not neg:
        raise ValueError("verification needs both same and different pairs")
    pos_arr, neg_arr = np.array(pos, dtype=np.float64), np.array(neg, dtype=np.float64)
    threshold, accuracy = best_threshold(pos_arr, neg_arr)
    margin, intersection = score_statistics(pos_arr, neg_arr, bins)
    return VerificationReport(accuracy=accuracy, threshold=threshold,
                              pos_scores=pos_arr, neg_scores=neg_arr,
                              expectation_margin=margin,
                              histogram_intersection=intersection, bins=bins)


def embeddings_by_id(model, samples: Sequence[PairedSample], x: torch.Tensor) -> Dict[int, torch.Tensor]:
    embs, _ = batched_forward(model, x)
    return {s.sample_id: embs[i] for i, s in enumerate(samples)}


def linear_probe(model, train_x: torch.Tensor, train_labels: torch.Tensor,
                 test_x: torch.Tensor, test_labels: torch.Tensor,
                 num_classes: int, epochs: int = 10, lr: float = 0.01,
                 batch_size: int = 96, seed: int = 5) -> float:
    """Accuracy of a retrained final linear layer over frozen embeddings."""
    if int(train_labels.max()) >= num_classes or int(test_labels.max()) >= num_classes:
        raise ValueError("labels exceed the declared class count")
    train_emb, _ = batched_forward(model, train_x)
    test_emb, _ = batched_forward(model, test_x)
    gen = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(train_emb.shape[1], num_classes)
    bound = 1.0 / (train_emb.shape[1] ** 0.5)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.uniform_(-bound, bound, generator=gen)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(len(train_emb))
        for start in range(0, len(train_emb), batch_size):
            idx = perm[start:start + batch_size]
            loss = F.cross_entropy(head(train_emb[idx]), train_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(test_emb).argmax(dim=-1)
    return float((pred == test_labels).sum().item()) / len(test_labels)


@dataclass
class RetrievalReport:
    ranks: Dict[int, float] = field(default_factory=dict)

    def to_text(self) -> str:
        return "".join(f"rank_{k}: {v}\n" for k, v in sorted(self.ranks.items()))


def retrieve(gallery_emb: torch.Tensor, gallery_labels: torch.Tensor,
             probe_emb: torch.Tensor, probe_labels: torch.Tensor,
             ks: Sequence[int] = (1, 10, 20)) -> RetrievalReport:
    """Rank-k retrieval: top-k cosine neighbors contain a same-label item.

    Ties break toward the lower gallery index.
    """
    if len(gallery_emb) == 0:
        raise ValueError("empty gallery")
    g = F.normalize(gallery_emb, dim=-1)
    p = F.normalize(probe_emb, dim=-1)
    sims = (p @ g.T).numpy()
    report = RetrievalReport()
    order = np.argsort(-sims, axis=1, kind="stable")
    labels = gallery_labels.numpy()
    for k in ks:
        k_eff = min(k, len(labels))
        topk = labels[order[:, :k_eff]]
        hits = (topk == probe_labels.numpy()[:, None]).any(axis=1)
        report.ranks[k] = float(hits.mean())
    return report


def export_embeddings(model, samples: Sequence[PairedSample], x: torch.Tensor,
                      path) -> Path:
    """CSV of (sample_id, label, embedding values), one row per sample."""
    path = Path(path)
    if len(samples) == 0:
        dim = getattr(model, "embed_dim", 0)
        header = ["sample_id", "label"] + [f"e{i}" for i in range(dim)]
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)
        return path
    embs, _ = batched_forward(model, x)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"] + [f"e{i}" for i in range(embs.shape[1])])
        for s, e in zip(samples, embs):
            writer.writerow([s.sample_id, s.label] + [repr(float(v)) for v in e])
    return path
