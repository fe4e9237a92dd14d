"""Training orchestration: teacher pretraining, student distillation, resume.

All randomness flows through generators derived from the experiment seed;
metric traces are reproducible bit for bit on one platform and precision.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import ExperimentConfig
from .critic import RelationCritic
from .data import PairedSample, restore_for_student
from .models import build_model
from .negatives import NegativeBank, SamplingPolicy, InsufficientNegatives
from .relation import RelationHead, TEACHER_STUDENT, TEACHER_TEACHER

METRIC_COLUMNS = ["step", "epoch", "lr", "cls", "kd", "rcd", "total", "warmup"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class CheckpointError(RuntimeError):
    pass


def lr_for_epoch(base_lr: float, milestones: List[int], gamma: float, epoch: int) -> float:
    """Step schedule: base_lr * gamma^(number of milestones <= epoch)."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def _seed_generators(seed: int):
    init_gen = torch.Generator().manual_seed(seed)
    data_rng = np.random.default_rng(seed * 1000 + 1)
    neg_rng = np.random.default_rng(seed * 1000 + 2)
    return init_gen, data_rng, neg_rng


def _stack_views(samples: List[PairedSample], config: ExperimentConfig):
    x_h = torch.stack([s.x_h for s in samples])
    x_s = torch.stack([
        restore_for_student(s.x_l, config.student.input_res, config.student.input_mode)
        for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    ids = np.array([s.sample_id for s in samples])
    return x_h, x_s, labels, ids


def params_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class MetricsLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})


def _accuracy(model, x, labels, batch: int = 256) -> float:
    was_training = model.training
    model.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            _, logits = model(x[i:i + batch])
            hits += (logits.argmax(dim=-1) == labels[i:i + batch]).sum().item()
    model.train(was_training)
    return hits / len(x)


def train_teacher(config: ExperimentConfig, samples: List[PairedSample]):
    """Supervised high-resolution training of the teacher backbone."""
    config.validate()
    num_classes = max(s.label for s in samples) + 1
    init_gen, data_rng, _ = _seed_generators(config.seed)
    teacher = build_model(config.teacher.arch, num_classes,
                          config.teacher.embed_dim,
                          in_channels=samples[0].x_h.shape[0], generator=init_gen)
    x_h = torch.stack([s.x_h for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    opt = torch.optim.SGD(teacher.parameters(), lr=config.optimizer.lr,
                          momentum=config.optimizer.momentum,
                          weight_decay=config.optimizer.weight_decay)
    log = MetricsLog()
    step = 0
    for epoch in range(1, config.teacher_epochs + 1):
        lr = lr_for_epoch(config.optimizer.lr, config.optimizer.milestones,
                          config.optimizer.gamma, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = data_rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            idx = perm[start:start + config.batch_size]
            _, logits = teacher(x_h[idx])
            loss = L.cls_loss(logits, labels[idx], config.cls_mode)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.append(step=step, epoch=epoch, lr=lr, cls=float(loss.detach()),
                       kd=0.0, rcd=0.0, total=float(loss.detach()), warmup=0)
            step += 1
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    stats = {"train_accuracy": _accuracy(teacher, x_h, labels), "steps": step}
    return teacher, stats, log


@dataclass
class DistillState:
    """Everything the distillation loop mutates between steps."""

    student: torch.nn.Module
    head_tt: RelationHead
    head_ts: RelationHead
    critic: RelationCritic
    optimizer: torch.optim.Optimizer
    bank: NegativeBank
    data_rng: np.random.Generator
    neg_rng: np.random.Generator
    num_classes: int = 0
    in_channels: int = 1
    step: int = 0
    next_epoch: int = 1
    log: MetricsLog = field(default_factory=MetricsLog)


def _build_state(config: ExperimentConfig, num_classes: int, in_channels: int,
                 dataset_size: int) -> DistillState:
    init_gen, data_rng, neg_rng = _seed_generators(config.seed)
    student = build_model(config.student.arch, num_classes,
                          config.student.embed_dim, in_channels=in_channels,
                          generator=init_gen)
    head_kwargs = dict(embed_dim=config.teacher.embed_dim,
                       out_dim=config.critic.relation_dim,
                       hidden_dim=config.critic.hidden_dim, generator=init_gen)
    head_tt = RelationHead(space=TEACHER_TEACHER, **head_kwargs)
    head_ts = RelationHead(space=TEACHER_STUDENT, **head_kwargs)
    critic = RelationCritic(relation_dim=config.critic.relation_dim,
                            proj_dim=config.critic.proj_dim, tau=config.critic.tau,
                            n_negatives=config.critic.n_negatives,
                            dataset_cardinality=dataset_size, generator=init_gen)
    params = list(student.parameters())
    if config.beta > 0:
        params += list(head_tt.parameters()) + list(head_ts.parameters())
        params += list(critic.parameters())
    optimizer = torch.optim.SGD(params, lr=config.optimizer.lr,
                                momentum=config.optimizer.momentum,
                                weight_decay=config.optimizer.weight_decay)
    bank = NegativeBank(config.bank.capacity)
    return DistillState(student=student, head_tt=head_tt, head_ts=head_ts,
                        critic=critic, optimizer=optimizer, bank=bank,
                        data_rng=data_rng, neg_rng=neg_rng,
                        num_classes=num_classes, in_channels=in_channels)


def _sample_bank_negatives(state: DistillState, config: ExperimentConfig,
                           anchor_ids, anchor_labels, partner_ids):
    """Per-anchor negatives from the bank; warm-up samples with replacement."""
    policy = SamplingPolicy(mode=config.bank.policy, n=config.critic.n_negatives)
    records = state.bank.entries
    if not records:
        return None, True
    bank_ids = np.array([r.sample_id for r in records])
    bank_labels = np.array([-1 if r.label is None else r.label for r in records])
    stacked = torch.stack([r.student_embedding for r in records])
    chosen = np.empty((len(anchor_ids), policy.n), dtype=np.int64)
    warmup = False
    for i, (aid, alabel, pid) in enumerate(zip(anchor_ids, anchor_labels, partner_ids)):
        if policy.mode == "supervised":
            eligible = np.nonzero((bank_labels != alabel) & (bank_ids != pid))[0]
        else:
            eligible = np.nonzero((bank_ids != aid) & (bank_ids != pid))[0]
        if len(eligible) == 0:
            return None, True
        if len(eligible) < policy.n:
            warmup = True
            chosen[i] = state.neg_rng.choice(eligible, size=policy.n, replace=True)
        else:
            chosen[i] = state.neg_rng.choice(eligible, size=policy.n, replace=False)
    return stacked[torch.from_numpy(chosen)], warmup


def _distill_epoch(state: DistillState, config: ExperimentConfig, teacher,
                   x_h, x_s, labels, ids, epoch: int):
    lr = lr_for_epoch(config.optimizer.lr, config.optimizer.milestones,
                      config.optimizer.gamma, epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    perm = state.data_rng.permutation(len(ids))
    for start in range(0, len(ids), config.batch_size):
        idx = perm[start:start + config.batch_size]
        batch_ids = ids[idx]
        batch_labels = labels[idx]
        with torch.no_grad():
            e_t, z_t = teacher(x_h[idx])
        e_s, z_s = state.student(x_s[idx])
        cls = L.cls_loss(z_s, batch_labels, config.cls_mode)
        kd = torch.zeros((), dtype=cls.dtype)
        rcd = torch.zeros((), dtype=cls.dtype)
        warmup = False
        if config.alpha > 0:
            kd = L.kd_loss(z_t, z_s, config.rho)
        if config.beta > 0:
            b = len(idx)
            if b > 1:
                order = state.neg_rng.permutation(b)
                partner = np.empty(b, dtype=np.int64)
                partner[order] = order[np.r_[1:b, 0]]  # fixed-point-free pairing
            else:
                partner = np.zeros(1, dtype=np.int64)
            v_t = state.head_tt(e_t, e_t[partner])
            v_ts = state.head_ts(e_t, e_s[partner])
            neg_embs, warmup = _sample_bank_negatives(
                state, config, batch_ids, batch_labels.numpy(), batch_ids[partner])
            pos_scores = state.critic(v_t, v_ts)
            if neg_embs is None:
                rcd = L.rcd_loss_from_scores(pos_scores, None,
                                             config.critic.n_negatives,
                                             config.negative_weighting)
            else:
                v_ts_neg = state.head_ts.per_anchor(e_t, neg_embs)
                neg_scores = state.critic.cross(v_t, v_ts_neg)
                rcd = L.rcd_loss_from_scores(pos_scores, neg_scores,
                                             config.critic.n_negatives,
                                             config.negative_weighting)
        loss = cls + config.alpha * kd + config.beta * rcd
        if not torch.isfinite(loss):
            raise TrainingDiverged(state.step)
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        if config.beta > 0:
            for j in range(len(idx)):
                state.bank.push(e_t[j], e_s[j].detach(), int(batch_ids[j]),
                                int(batch_labels[j]))
        breakdown = L.total_loss(cls, kd, rcd, L.LossWeights(
            alpha=config.alpha, beta=config.beta, rho=config.rho))
        state.log.append(step=state.step, epoch=epoch, lr=lr, cls=breakdown.cls,
                         kd=breakdown.kd, rcd=breakdown.rcd, total=breakdown.total,
                         warmup=int(warmup))
        state.step += 1
    state.next_epoch = epoch + 1


def distill_student(config: ExperimentConfig, teacher, samples: List[PairedSample],
                    out_dir=None, state: Optional[DistillState] = None,
                    checkpoint_every: Optional[int] = None):
    """Distill a low-resolution student from a frozen teacher.

    Returns (student, state); when out_dir is given, writes metrics.csv and a
    final checkpoint there.
    """
    config.validate()
    teacher.eval()
    num_classes = max(s.label for s in samples) + 1
    x_h, x_s, labels, ids = _stack_views(samples, config)
    if state is None:
        state = _build_state(config, num_classes, samples[0].x_h.shape[0], len(samples))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(state.next_epoch, config.epochs + 1):
        _distill_epoch(state, config, teacher, x_h, x_s, labels, ids, epoch)
        if (out_dir is not None and checkpoint_every
                and epoch % checkpoint_every == 0 and epoch < config.epochs):
            save_checkpoint(out_dir / f"checkpoint_epoch_{epoch:03d}.pt",
                            config, teacher, state)
    if out_dir is not None:
        state.log.write_csv(out_dir / "metrics.csv")
        save_checkpoint(out_dir / "checkpoint_final.pt", config, teacher, state)
    return state.student, state


def save_checkpoint(path, config: ExperimentConfig, teacher, state: DistillState):
    payload = {
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "num_classes": state.num_classes,
        "in_channels": state.in_channels,
        "teacher_digest": params_digest(teacher),
        "step": state.step,
        "next_epoch": state.next_epoch,
        "student": state.student.state_dict(),
        "head_tt": state.head_tt.state_dict(),
        "head_ts": state.head_ts.state_dict(),
        "critic": state.critic.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "neg_rng": state.neg_rng.bit_generator.state,
        "log_rows": state.log.rows,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    torch.save({"sha256": hashlib.sha256(blob).hexdigest(), "blob": blob}, path)


def load_checkpoint(path) -> dict:
    try:
        wrapper = torch.load(path, weights_only=False)
        blob = wrapper["blob"]
        digest = wrapper["sha256"]
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError(f"checksum mismatch for checkpoint {path}")
    return torch.load(io.BytesIO(blob), weights_only=False)


def save_teacher(path, config: ExperimentConfig, teacher, stats: dict):
    first_weight = next(iter(teacher.features.parameters())) if hasattr(teacher, "features") \
        else next(iter(teacher.parameters()))
    payload = {
        "kind": "teacher",
        "config": config.to_dict(),
        "arch": config.teacher.arch,
        "embed_dim": teacher.embed_dim,
        "num_classes": teacher.num_classes,
        "in_channels": first_weight.shape[1],
        "state_dict": teacher.state_dict(),
        "stats": stats,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    torch.save({"sha256": hashlib.sha256(blob).hexdigest(), "blob": blob}, path)


def load_teacher(path):
    payload = load_checkpoint(path)
    if payload.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint")
    teacher = build_model(payload["arch"], payload["num_classes"],
                          payload["embed_dim"], in_channels=payload["in_channels"])
    teacher.load_state_dict(payload["state_dict"])
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher, payload


def load_student(path):
    """Rebuild the distilled student from a final checkpoint."""
    from .config import config_from_dict

    payload = load_checkpoint(path)
    if "student" not in payload:
        raise CheckpointError(f"{path} is not a distillation checkpoint")
    config = config_from_dict(payload["config"])
    student = build_model(config.student.arch, payload["num_classes"],
                          config.student.embed_dim,
                          in_channels=payload["in_channels"])
    student.load_state_dict(payload["student"])
    student.eval()
    return student, config, payload


def resume(checkpoint_path, config: ExperimentConfig, teacher,
           samples: List[PairedSample], out_dir=None):
    """Continue a distillation run from a checkpoint; bank is rebuilt empty."""
    config.validate()
    payload = load_checkpoint(checkpoint_path)
    if payload["config_hash"] != config.config_hash():
        raise CheckpointError("checkpoint config hash does not match supplied config")
    if payload["teacher_digest"] != params_digest(teacher):
        raise CheckpointError("checkpoint teacher parameters do not match")
    num_classes = max(s.label for s in samples) + 1
    state = _build_state(config, num_classes, samples[0].x_h.shape[0], len(samples))
    state.student.load_state_dict(payload["student"])
    state.head_tt.load_state_dict(payload["head_tt"])
    state.head_ts.load_state_dict(payload["head_ts"])
    state.critic.load_state_dict(payload["critic"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.neg_rng.bit_generator.state = payload["neg_rng"]
    state.step = payload["step"]
    state.next_epoch = payload["next_epoch"]
    state.log = MetricsLog(rows=list(payload["log_rows"]))
    return distill_student(config, teacher, samples, out_dir=out_dir, state=state)
