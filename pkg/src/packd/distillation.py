"""Loss functions and training loops for teachers, baselines and the distilled student."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .evaluation import evaluate
from .models import ModelSpec, Predictor, build_model

log = logging.getLogger(__name__)

EPS = 1e-7


# --------------------------------------------------------------------------- configs

@dataclass(frozen=True)
class LossConfig:
    T: float = 4.0
    lambda_mode: str = "fixed"  # "fixed" or "f1_weighted"
    lam: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lambda_mode not in ("fixed", "f1_weighted"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    patience: int | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# --------------------------------------------------------------------------- losses

def _clamp(p):
    return p.clamp(EPS, 1 - EPS)


def bce_loss(labels: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over labels and batch."""
    if labels.shape != probs.shape:
        raise ValueError(f"shape mismatch: {tuple(labels.shape)} vs {tuple(probs.shape)}")
    y = labels.to(probs.dtype)
    p = _clamp(probs)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def softmax_T(logits: torch.Tensor, T: float = 1.0) -> torch.Tensor:
    if logits.numel() == 0:
        raise ValueError("empty logits")
    if T <= 0:
        raise ValueError("temperature must be positive")
    return torch.softmax(logits / T, dim=-1)


def single_label_kd_loss(teacher_logits, student_logits, truth, T: float, alpha: float, beta: float):
    """``alpha * soft + beta * hard`` for single-label classification.

    ``soft`` is the cross-entropy of T-softened student probabilities against
    T-softened teacher probabilities; ``hard`` the T=1 cross-entropy against
    the one-hot ground truth (``truth`` holds class indices). Batch mean.
    """
    if student_logits.numel() == 0:
        raise ValueError("empty logits")
    soft = -(softmax_T(teacher_logits.detach(), T) * torch.log_softmax(student_logits / T, dim=-1)).sum(-1)
    hard = -torch.log_softmax(student_logits, dim=-1).gather(-1, truth.long().unsqueeze(-1)).squeeze(-1)
    return (alpha * soft + beta * hard).mean()


def soft_sigmoid(logits: torch.Tensor, T: float = 1.0) -> torch.Tensor:
    if T <= 0:
        raise ValueError("temperature must be positive")
    return torch.sigmoid(logits / T)


def multilabel_kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, T: float) -> torch.Tensor:
    """Two-outcome KL(teacher || student) per label, summed over labels, batch mean (nats)."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    zt = _clamp(soft_sigmoid(teacher_logits.detach(), T))
    zs = _clamp(soft_sigmoid(student_logits, T))
    kl = zt * (torch.log(zt) - torch.log(zs)) + (1 - zt) * (torch.log(1 - zt) - torch.log(1 - zs))
    if kl.dim() == 1:
        return kl.sum()
    return kl.sum(-1).mean()


def total_loss(labels, teacher_logits, student_logits, cfg: LossConfig, lam: float | None = None):
    """``lam * KD + (1 - lam) * BCE``; the BCE term uses plain (T=1) sigmoid."""
    lam = cfg.lam if lam is None else lam
    kd = multilabel_kd_loss(teacher_logits, student_logits, cfg.T)
    bce = bce_loss(labels, torch.sigmoid(student_logits))
    return lam * kd + (1 - lam) * bce


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    best_f1: float
    best_epoch: int
    curve: list = field(default_factory=list)  # dicts: epoch, loss, f1, precision, recall


@dataclass
class TeacherEnsemble:
    teachers: list
    f1: list
    lambdas: list


def ensemble_lambdas(cfg: LossConfig, f1s: Sequence[float]) -> list[float]:
    """Per-teacher mixing weights: constant, or scaled by each teacher's F1 relative to the best."""
    if cfg.lambda_mode == "fixed":
        return [cfg.lam] * len(f1s)
    top = max(f1s) if len(f1s) else 0.0
    if top <= 0:
        return [cfg.lam] * len(f1s)
    return [float(min(1.0, max(0.0, cfg.lam * f / top))) for f in f1s]


def make_ensemble(teachers: Sequence[Predictor], f1s: Sequence[float], cfg: LossConfig) -> TeacherEnsemble:
    return TeacherEnsemble(list(teachers), list(f1s), ensemble_lambdas(cfg, f1s))


def _optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=0.9)


def _batches(idx: np.ndarray, batch_size: int, gen: torch.Generator) -> list[np.ndarray]:
    order = idx[torch.randperm(len(idx), generator=gen).numpy()]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


@torch.no_grad()
def teacher_logits(teacher: Predictor, dataset, idx, batch_size: int = 1024) -> torch.Tensor:
    was_training = teacher.training
    teacher.eval()
    out = torch.cat([teacher(torch.from_numpy(dataset.inputs(idx[i:i + batch_size])))
                     for i in range(0, len(idx), batch_size)]) if len(idx) else torch.empty(0)
    teacher.train(was_training)
    return out


def _fit(model: Predictor, cfg: TrainConfig, epoch_steps: Callable[[torch.Generator], list],
         loss_fn: Callable, validate: Callable[[Predictor], dict], tag: str) -> TrainResult:
    """Shared loop: seeded batch order, per-epoch validation, best-epoch restore."""
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _optimizer(model, cfg)
    best_state, best_f1, best_epoch, stale = None, -1.0, 0, 0
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for step in epoch_steps(gen):
            opt.zero_grad()
            loss = loss_fn(model, step)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        m = validate(model)
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                      "f1": m["f1"], "precision": m["precision"], "recall": m["recall"]})
        log.info("%s epoch %d loss %.5f f1 %.4f", tag, epoch, curve[-1]["loss"], m["f1"])
        if m["f1"] > best_f1:
            best_state, best_f1, best_epoch, stale = copy.deepcopy(model.state_dict()), m["f1"], epoch, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(best_f1, best_epoch, curve)


def _check_nonempty(idx, what):
    if len(idx) == 0:
        raise ValueError(f"{what} is empty; try a smaller number of clusters K")


def train_bce(train_ds, eval_ds, spec: ModelSpec, cfg: TrainConfig, train_idx=None, eval_idx=None,
              tag: str = "bce") -> tuple[Predictor, TrainResult]:
    """Supervised training on BCE alone; validation F1 on ``eval_ds[eval_idx]``."""
    train_idx = np.arange(len(train_ds)) if train_idx is None else np.asarray(train_idx)
    _check_nonempty(train_idx, f"{tag} training partition")
    model = build_model(spec, cfg.seed)

    def steps(gen):
        return _batches(train_idx, cfg.batch_size, gen)

    def loss_fn(m, b):
        x = torch.from_numpy(train_ds.inputs(b))
        y = torch.from_numpy(train_ds.labels[b])
        return bce_loss(y, torch.sigmoid(m(x)))

    result = _fit(model, cfg, steps, loss_fn, lambda m: evaluate(m, eval_ds, eval_idx, cfg.threshold), tag)
    return model, result


def train_teacher(train_ds, eval_ds, spec: ModelSpec, cfg: TrainConfig, cluster: int | None = None):
    """Teacher on one cluster's samples (or all samples when ``cluster`` is None)."""
    if cluster is None:
        return train_bce(train_ds, eval_ds, spec, cfg, tag="teacher")
    tr = np.flatnonzero(train_ds.cluster_ids == cluster)
    ev = np.flatnonzero(eval_ds.cluster_ids == cluster)
    _check_nonempty(tr, f"cluster {cluster} training partition")
    _check_nonempty(ev, f"cluster {cluster} evaluation partition")
    return train_bce(train_ds, eval_ds, spec, cfg, tr, ev, tag=f"teacher[{cluster}]")


def distill_student(ensemble: TeacherEnsemble, train_ds, eval_ds, student_spec: ModelSpec,
                    loss_cfg: LossConfig, cfg: TrainConfig, partitions: Mapping[int, np.ndarray] | None = None,
                    schedule: str = "mixed", tag: str = "student") -> tuple[Predictor, TrainResult]:
    """Distil every teacher into one student.

    Every sample is scored against the teacher of its own cluster with that
    teacher's ``lambda_k``. ``schedule`` decides how batches are formed:
    ``mixed`` shuffles all clusters together, ``interleaved`` alternates
    single-cluster batches, ``sequential`` runs each cluster's batches as one
    block in ascending cluster order. Teachers are frozen: their logits are
    computed once, up front. Validation uses the full ``eval_ds``.
    """
    K = len(ensemble.teachers)
    if schedule not in ("mixed", "interleaved", "sequential"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if K < 1:
        raise ValueError("need at least one teacher")
    for t in ensemble.teachers:
        if t.spec.out_labels != student_spec.out_labels:
            raise ValueError(f"teacher emits {t.spec.out_labels} labels, student {student_spec.out_labels}")
    if partitions is None:
        partitions = ({0: np.arange(len(train_ds))} if K == 1
                      else {k: np.flatnonzero(train_ds.cluster_ids == k) for k in range(K)})
    if sorted(partitions) != list(range(K)):
        raise ValueError(f"partitions {sorted(partitions)} do not match {K} teachers")

    # teacher logits and owning cluster, indexed by train sample
    owner = np.full(len(train_ds), -1, dtype=np.int64)
    soft = torch.zeros(len(train_ds), student_spec.out_labels)
    for k in range(K):
        idx = np.asarray(partitions[k], dtype=np.int64)
        if (owner[idx] >= 0).any():
            raise ValueError(f"partition {k} overlaps another partition")
        owner[idx] = k
        soft[torch.from_numpy(idx)] = teacher_logits(ensemble.teachers[k], train_ds, idx)
    members = np.flatnonzero(owner >= 0)

    student = build_model(student_spec, cfg.seed)

    def steps(gen):
        if schedule == "mixed":
            return list(_batches(members, cfg.batch_size, gen))
        per = [list(_batches(np.asarray(partitions[k]), cfg.batch_size, gen)) for k in range(K)]
        if schedule == "sequential":
            return [b for p in per for b in p]
        # round-robin over clusters, each mini-batch still drawn from one cluster
        return [p[i] for i in range(max(map(len, per))) for p in per if i < len(p)]

    def loss_fn(m, b):
        out = m(torch.from_numpy(train_ds.inputs(b)))
        y = torch.from_numpy(train_ds.labels[b])
        t = soft[torch.from_numpy(b)]
        ks = owner[b]
        loss = 0.0
        # both loss terms are batch means, so weighting each cluster's slice by
        # its share of the batch gives the per-sample average
        for k in np.unique(ks):
            sel = torch.from_numpy(np.flatnonzero(ks == k))
            loss = loss + len(sel) / len(b) * total_loss(y[sel], t[sel], out[sel], loss_cfg,
                                                       lam=ensemble.lambdas[int(k)])
        return loss

    result = _fit(student, cfg, steps, loss_fn, lambda m: evaluate(m, eval_ds, None, cfg.threshold), tag)
    return student, result


def train_baselines(train_ds, eval_ds, teacher_spec: ModelSpec, student_spec: ModelSpec, loss_cfg: LossConfig,
                    teacher_cfg: TrainConfig, student_cfg: TrainConfig, arms: Sequence[str] | None = None,
                    teacher: Predictor | None = None) -> dict:
    """Unclustered baselines: ``student_only``, ``teacher_only`` and ``standard_kd``.

    ``standard_kd`` distils the unclustered teacher into the student with K=1
    and a fixed lambda of ``loss_cfg.lam``. Returns ``{arm: (model, TrainResult)}``.
    """
    arms = tuple(arms or ("student_only", "teacher_only", "standard_kd"))
    out = {}
    if "student_only" in arms:
        out["student_only"] = train_bce(train_ds, eval_ds, student_spec, student_cfg, tag="student_only")
    if "teacher_only" in arms or ("standard_kd" in arms and teacher is None):
        out["teacher_only"] = train_bce(train_ds, eval_ds, teacher_spec, teacher_cfg, tag="teacher_only")
        teacher = out["teacher_only"][0]
    if "standard_kd" in arms:
        fixed = LossConfig(T=loss_cfg.T, lambda_mode="fixed", lam=loss_cfg.lam)
        ens = TeacherEnsemble([teacher], [float("nan")], [fixed.lam])
        out["standard_kd"] = distill_student(ens, train_ds, eval_ds, student_spec, fixed, student_cfg,
                                             {0: np.arange(len(train_ds))}, tag="standard_kd")
    return out
