"""Training loops: warm-up, periodic rank-snapshot refresh, and interleaved
teacher/student updates mixing the CF loss with the distillation loss.

The teacher updates before the student within every batch, so the student
distills against the teacher's post-update predictions.  During distillation
steps the CF negatives are taken from the rank-discrepancy draw instead of
fresh uniform samples; the negative count stays at the base recipe's value.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .distill import (
    Direction,
    DistillConfig,
    SamplingScheme,
    SnapshotSampler,
    bd_loss_batch,
)
from .models import (
    POINTWISE,
    AdamState,
    FactorModel,
    adam_step,
    coalesce,
    init_adam,
    init_model,
    pairwise_loss_batch,
    pointwise_loss_batch,
)
from .ranking import RankSnapshot, average_rank_difference, snapshot

__all__ = [
    "Seeds",
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "sample_cf_negatives",
    "train_bd",
    "train_cf",
    "train_baseline_kd",
]


@dataclass
class Seeds:
    """Independent seeds for the four RNG concerns of one run."""

    teacher_init: int = 11
    student_init: int = 12
    sampling: int = 13
    negatives: int = 14


@dataclass
class TrainConfig:
    teacher_d: int = 50
    student_d: int = 5
    epochs: int = 30
    warmup_epochs: int = 5
    snapshot_period: int = 10
    batch_size: int = 128
    lr_teacher: float = 1e-3
    lr_student: float = 1e-3
    l2: float = 1e-4
    cf_negatives: int = 1
    loss_kind: str = POINTWISE
    use_item_bias: bool = True
    init_scale: float = 0.01
    val_k: int = 50
    distill: DistillConfig = field(default_factory=DistillConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self) -> None:
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.snapshot_period < 1:
            raise ValueError("snapshot_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.student_d > self.teacher_d:
            raise ValueError("student_d must not exceed teacher_d")
        if self.cf_negatives < 1:
            raise ValueError("cf_negatives must be >= 1")
        self.distill.validate()


@dataclass
class EpochRecord:
    epoch: int
    cf_loss_teacher: float | None
    bd_loss_teacher: float | None
    cf_loss_student: float | None
    bd_loss_student: float | None
    val_hit_teacher: float | None
    val_ndcg_teacher: float | None
    val_hit_student: float | None
    val_ndcg_student: float | None
    snapshot_rebuilt: bool
    seconds: float


@dataclass
class TrainLog:
    val_k: int
    records: list[EpochRecord] = field(default_factory=list)
    snapshot_epochs: list[int] = field(default_factory=list)
    sync: list[tuple[int, float]] = field(default_factory=list)  # (epoch, avg rank diff)
    best_epoch_teacher: int | None = None
    best_val_teacher: float | None = None
    best_epoch_student: int | None = None
    best_val_student: float | None = None


def sample_cf_negatives(
    dataset: Dataset,
    u: int,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """k distinct uniform draws from the user's unobserved items, by
    rejection against the training positives."""
    pos = set(int(i) for i in dataset.train_pos[u])
    if dataset.m - len(pos) < k:
        raise ValueError(f"user {u} has fewer than {k} unobserved items")
    out: list[int] = []
    chosen: set[int] = set()
    while len(out) < k:
        j = int(rng.integers(0, dataset.m))
        if j in pos or j in chosen:
            continue
        chosen.add(j)
        out.append(j)
    return np.asarray(out, dtype=np.int64)


def _neg_batch(
    users: np.ndarray,
    k: int,
    rng: np.random.Generator,
    observed: np.ndarray,
) -> np.ndarray:
    """(B, k) distinct uniform negatives per row, rejection-sampled."""
    B = users.shape[0]
    m = observed.shape[1]
    out = rng.integers(0, m, size=(B, k), dtype=np.int64)
    for _ in range(10_000):
        bad = observed[users[:, None], out]
        if k > 1:
            srt = np.sort(out, axis=1)
            has_dup = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
            for b in np.nonzero(has_dup)[0]:
                _, first = np.unique(out[b], return_index=True)
                dup_mask = np.ones(k, dtype=bool)
                dup_mask[first] = False
                bad[b] |= dup_mask
        if not bad.any():
            return out
        out[bad] = rng.integers(0, m, size=int(bad.sum()), dtype=np.int64)
    raise RuntimeError("negative sampling failed to converge")


def _val_rank(model: FactorModel, dataset: Dataset, cand: np.ndarray,
              target: np.ndarray) -> np.ndarray:
    """Rank of each user's target item among its candidates (1 = best),
    ties broken by ascending item index."""
    from .models import score_matrix

    scores = score_matrix(model)
    users = np.arange(dataset.n)
    s_t = scores[users, target]
    higher = ((scores > s_t[:, None]) & cand).sum(axis=1)
    idx = np.arange(dataset.m)[None, :]
    tie = ((scores == s_t[:, None]) & cand & (idx < target[:, None])).sum(axis=1)
    return 1 + higher + tie


def _val_metrics(model, dataset, cand, k) -> tuple[float, float]:
    rank = _val_rank(model, dataset, cand, dataset.val_item)
    hit = rank <= k
    ndcg = np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0)
    return float(hit.mean()), float(ndcg.mean())


def _cf_kernel(loss_kind: str):
    return pointwise_loss_batch if loss_kind == POINTWISE else pairwise_loss_batch


@dataclass
class _Side:
    """One model's mutable training state inside the loop."""

    model: FactorModel
    opt: AdamState
    rng_neg: np.random.Generator
    lam: float  # weight of the distillation loss flowing INTO this model
    update: bool  # whether this side's parameters move
    sampler: SnapshotSampler | None = None
    best_val: float = -1.0
    best_epoch: int = -1
    best_params: FactorModel | None = None


def _phase(
    side: _Side,
    target: FactorModel | None,
    users: np.ndarray,
    pos: np.ndarray,
    cfg: TrainConfig,
    observed: np.ndarray,
    distilling: bool,
    epoch: int,
    batch_index: int,
) -> tuple[float, float]:
    """One model's update on one batch; returns (cf loss, bd loss)."""
    kernel = _cf_kernel(cfg.loss_kind)
    dcfg = cfg.distill
    drawn = None
    if distilling:
        drawn = side.sampler.draw_batch(users, dcfg.n_samples)
        if dcfg.reuse_negatives:
            # the CF negatives come from the distillation draw (first
            # cf_negatives items); the count stays at the base recipe's value
            negs = drawn[:, : cfg.cf_negatives].copy()
            short = negs[:, -1] < 0
            if short.any():  # not enough positive-weight items: top up uniformly
                filler = _neg_batch(users[short], cfg.cf_negatives, side.rng_neg, observed)
                rows = np.nonzero(short)[0]
                gap = negs[rows] < 0
                negs[rows] = np.where(gap, filler, negs[rows])
        else:
            negs = _neg_batch(users, cfg.cf_negatives, side.rng_neg, observed)
    else:
        negs = _neg_batch(users, cfg.cf_negatives, side.rng_neg, observed)

    cf_l, g_cf = kernel(side.model, users, pos, negs)
    bd_l = 0.0
    parts = [g_cf]
    if distilling and (drawn >= 0).any():
        bd_raw, g_bd = bd_loss_batch(side.model, target, users, drawn, dcfg.temperature)
        bd_l = bd_raw
        parts.append(g_bd.scaled(side.lam))
    if not np.isfinite(cf_l + bd_l):
        raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
    adam_step(side.opt, side.model, coalesce(*parts))
    return cf_l, bd_l


def _run(
    dataset: Dataset,
    cfg: TrainConfig,
    train_teacher: bool,
    train_student: bool,
    allow_distill: bool,
    frozen_teacher: FactorModel | None = None,
    scheme: SamplingScheme | None = None,
    log_path: str | Path | None = None,
) -> tuple[FactorModel | None, FactorModel | None, TrainLog]:
    cfg.validate()
    n, m = dataset.n, dataset.m
    seeds = cfg.seeds
    dcfg = cfg.distill

    teacher = None
    student = None
    if frozen_teacher is not None:
        teacher = frozen_teacher
    elif train_teacher or allow_distill:
        teacher = init_model(n, m, cfg.teacher_d, seeds.teacher_init, cfg.init_scale,
                             cfg.loss_kind, cfg.use_item_bias)
    if train_student or allow_distill:
        student = init_model(n, m, cfg.student_d, seeds.student_init, cfg.init_scale,
                             cfg.loss_kind, cfg.use_item_bias)

    distill_t = allow_distill and train_teacher and dcfg.lambda_st > 0
    distill_s = allow_distill and train_student and dcfg.lambda_ts > 0
    any_distill = distill_t or distill_s

    rng_shuffle = np.random.default_rng([seeds.negatives, 2])
    side_t = _Side(teacher, init_adam(teacher, cfg.lr_teacher, cfg.l2) if train_teacher else None,
                   np.random.default_rng([seeds.negatives, 0]), dcfg.lambda_st,
                   train_teacher) if teacher is not None else None
    side_s = _Side(student, init_adam(student, cfg.lr_student, cfg.l2) if train_student else None,
                   np.random.default_rng([seeds.negatives, 1]), dcfg.lambda_ts,
                   train_student) if student is not None else None
    rng_samp_s2t = np.random.default_rng([seeds.sampling, 0])
    rng_samp_t2s = np.random.default_rng([seeds.sampling, 1])

    users_all = np.concatenate([np.full(len(p), u, dtype=np.int64)
                                for u, p in enumerate(dataset.train_pos)])
    items_all = np.concatenate(dataset.train_pos).astype(np.int64)
    observed = dataset.observed_mask()
    val_cand = ~observed.copy()
    val_cand[np.arange(n), dataset.test_item] = False  # rank val item without the test item

    log = TrainLog(val_k=cfg.val_k)
    log_fh = open(log_path, "w") if log_path is not None else None
    snap_t: RankSnapshot | None = None
    snap_s: RankSnapshot | None = None
    frozen_snap_t: RankSnapshot | None = None

    def rebuild_snapshots(epoch: int) -> None:
        nonlocal snap_t, snap_s, frozen_snap_t
        if frozen_teacher is not None:
            if frozen_snap_t is None:
                frozen_snap_t = snapshot(frozen_teacher, dataset, epoch)
            snap_t = frozen_snap_t
        else:
            snap_t = snapshot(teacher, dataset, epoch)
        snap_s = snapshot(student, dataset, epoch)
        if distill_t:
            side_t.sampler = SnapshotSampler(Direction.S_TO_T, snap_t, snap_s, dcfg,
                                             rng_samp_s2t, scheme)
        if distill_s:
            side_s.sampler = SnapshotSampler(Direction.T_TO_S, snap_t, snap_s, dcfg,
                                             rng_samp_t2s, scheme)
        log.snapshot_epochs.append(epoch)
        log.sync.append((epoch, average_rank_difference(snap_t, snap_s, dataset.test_item)))

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            distilling = any_distill and epoch >= cfg.warmup_epochs
            rebuilt = False
            if distilling and (epoch - cfg.warmup_epochs) % cfg.snapshot_period == 0:
                rebuild_snapshots(epoch)
                rebuilt = True

            perm = rng_shuffle.permutation(users_all.shape[0])
            cf_t = bd_t = cf_s = bd_s = 0.0
            for b0 in range(0, perm.size, cfg.batch_size):
                sel = perm[b0: b0 + cfg.batch_size]
                u_b, i_b = users_all[sel], items_all[sel]
                bi = b0 // cfg.batch_size
                if side_t is not None and side_t.update:
                    l1, l2_ = _phase(side_t, student, u_b, i_b, cfg, observed,
                                     distilling and distill_t, epoch, bi)
                    cf_t += l1
                    bd_t += l2_
                if side_s is not None and side_s.update:
                    l1, l2_ = _phase(side_s, teacher, u_b, i_b, cfg, observed,
                                     distilling and distill_s, epoch, bi)
                    cf_s += l1
                    bd_s += l2_

            rec = EpochRecord(
                epoch=epoch,
                cf_loss_teacher=cf_t if side_t is not None and side_t.update else None,
                bd_loss_teacher=bd_t if distill_t and distilling else None,
                cf_loss_student=cf_s if side_s is not None and side_s.update else None,
                bd_loss_student=bd_s if distill_s and distilling else None,
                val_hit_teacher=None, val_ndcg_teacher=None,
                val_hit_student=None, val_ndcg_student=None,
                snapshot_rebuilt=rebuilt,
                seconds=0.0,
            )
            for side, which in ((side_t, "teacher"), (side_s, "student")):
                if side is None or not side.update:
                    continue
                hit, ndcg = _val_metrics(side.model, dataset, val_cand, cfg.val_k)
                setattr(rec, f"val_hit_{which}", hit)
                setattr(rec, f"val_ndcg_{which}", ndcg)
                if hit > side.best_val:
                    side.best_val = hit
                    side.best_epoch = epoch
                    side.best_params = side.model.copy()
            rec.seconds = time.perf_counter() - t0
            log.records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(asdict(rec)) + "\n")
                log_fh.flush()

        if any_distill:  # final synchronization snapshot on the end-of-training parameters
            final_t = snapshot(frozen_teacher if frozen_teacher is not None else teacher,
                               dataset, cfg.epochs)
            final_s = snapshot(student, dataset, cfg.epochs)
            log.sync.append((cfg.epochs,
                             average_rank_difference(final_t, final_s, dataset.test_item)))
    finally:
        if log_fh is not None:
            log_fh.close()

    out_t = out_s = None
    if side_t is not None and side_t.update:
        log.best_epoch_teacher = side_t.best_epoch
        log.best_val_teacher = side_t.best_val
        out_t = side_t.best_params
    if side_s is not None and side_s.update:
        log.best_epoch_student = side_s.best_epoch
        log.best_val_student = side_s.best_val
        out_s = side_s.best_params
    return out_t, out_s, log


def train_bd(
    dataset: Dataset,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[FactorModel, FactorModel, TrainLog]:
    """Train teacher and student simultaneously under bidirectional
    distillation; returns the best-validation-epoch checkpoints."""
    t, s, log = _run(dataset, cfg, train_teacher=True, train_student=True,
                     allow_distill=True, log_path=log_path)
    return t, s, log


def train_cf(
    dataset: Dataset,
    cfg: TrainConfig,
    role: str,
    log_path: str | Path | None = None,
) -> tuple[FactorModel, TrainLog]:
    """CF-only training of one role ("teacher" or "student").

    Consumes exactly the RNG streams the same role consumes inside
    :func:`train_bd`, so a zero-lambda BD run reproduces it bit for bit.
    """
    if role not in ("teacher", "student"):
        raise ValueError("role must be 'teacher' or 'student'")
    t, s, log = _run(dataset, cfg, train_teacher=role == "teacher",
                     train_student=role == "student", allow_distill=False,
                     log_path=log_path)
    return (t if role == "teacher" else s), log


def train_baseline_kd(
    dataset: Dataset,
    cfg: TrainConfig,
    scheme: SamplingScheme,
    teacher: FactorModel,
    log_path: str | Path | None = None,
) -> tuple[FactorModel, TrainLog]:
    """Unidirectional distillation from a frozen, pre-trained teacher.

    The student minimizes L_CF + lambda_ts * L_BD with items drawn by the
    given scheme over the frozen teacher's snapshot (the student snapshot
    keeps refreshing every period for the discrepancy-based schemes).
    """
    if teacher.n != dataset.n or teacher.m != dataset.m:
        raise ValueError("teacher checkpoint does not match the dataset dimensions")
    _, s, log = _run(dataset, cfg, train_teacher=False, train_student=True,
                     allow_distill=True, frozen_teacher=teacher, scheme=scheme,
                     log_path=log_path)
    return s, log
