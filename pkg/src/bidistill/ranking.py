"""Full per-user rankings of candidate items, periodic rank snapshots, and
rank-difference analytics between two models."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .models import FactorModel, score_matrix

__all__ = [
    "RankSnapshot",
    "RankDiffReport",
    "full_rank",
    "snapshot",
    "rank_difference",
    "average_rank_difference",
    "rank_diff_report",
    "write_analytics",
]


@dataclass
class RankSnapshot:
    """Frozen full ranking of every user's candidate items.

    ``rank_of[u, i]`` is the rank of item ``i`` (1 = highest logit) when
    ``i`` is a candidate for ``u``, else 0.  ``order[u, :n_candidates[u]]``
    lists the candidates in rank order.  Candidates are all items outside
    the user's training positives; held-out val/test items are candidates.
    """

    epoch_stamp: int
    rank_of: np.ndarray  # (n, m) int32, 0 = not a candidate
    order: np.ndarray  # (n, m) int32
    n_candidates: np.ndarray  # (n,) int32

    @property
    def n(self) -> int:
        return self.rank_of.shape[0]

    @property
    def m(self) -> int:
        return self.rank_of.shape[1]

    def candidates(self, u: int) -> np.ndarray:
        return self.order[u, : self.n_candidates[u]]


def full_rank(model: FactorModel, u: int, candidates: np.ndarray) -> np.ndarray:
    """Rank the given candidate items for user ``u`` by descending logit.

    Returns ranks aligned with the input positions (1 = best).  Logit
    ties break by ascending item index.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("candidates must be nonempty")
    logits = model.Q[candidates] @ model.P[u]
    if model.b_item is not None:
        logits = logits + model.b_item[candidates]
    order = np.lexsort((candidates, -logits))  # logit desc, item index asc
    ranks = np.empty(candidates.size, dtype=np.int64)
    ranks[order] = np.arange(1, candidates.size + 1)
    return ranks


def snapshot(model: FactorModel, dataset: Dataset, epoch: int) -> RankSnapshot:
    """Rank every user's candidate set (all items minus training positives)."""
    n, m = dataset.n, dataset.m
    scores = score_matrix(model)
    for u, pos in enumerate(dataset.train_pos):
        scores[u, pos] = -np.inf  # observed items sort behind all candidates
    order = np.argsort(-scores, axis=1, kind="stable").astype(np.int32)
    rank_of = np.empty((n, m), dtype=np.int32)
    np.put_along_axis(rank_of, order.astype(np.int64),
                      np.broadcast_to(np.arange(1, m + 1, dtype=np.int32), (n, m)), axis=1)
    n_candidates = np.empty(n, dtype=np.int32)
    for u, pos in enumerate(dataset.train_pos):
        rank_of[u, pos] = 0
        n_candidates[u] = m - len(pos)
    return RankSnapshot(epoch_stamp=epoch, rank_of=rank_of, order=order,
                        n_candidates=n_candidates)


def rank_difference(snap_t: RankSnapshot, snap_s: RankSnapshot, u: int, i: int) -> int:
    """rank_T - rank_S for one (user, item); positive means the student
    ranks the item higher (better)."""
    rt = int(snap_t.rank_of[u, i])
    rs = int(snap_s.rank_of[u, i])
    if rt == 0 or rs == 0:
        raise ValueError(f"item {i} is not a candidate for user {u} in both snapshots")
    return rt - rs


def average_rank_difference(
    snap_t: RankSnapshot,
    snap_s: RankSnapshot,
    test_item: np.ndarray,
) -> float:
    """Mean absolute rank difference over the test interactions, normalized
    by n*m.  Zero iff the two models rank every test item identically."""
    n, m = snap_t.n, snap_t.m
    users = np.arange(n)
    rt = snap_t.rank_of[users, test_item].astype(np.int64)
    rs = snap_s.rank_of[users, test_item].astype(np.int64)
    if np.any(rt == 0) or np.any(rs == 0):
        raise ValueError("a test item is not a candidate in one of the snapshots")
    return float(np.abs(rt - rs).sum() / (n * m))


@dataclass
class RankDiffReport:
    """Analytics bundle comparing a teacher and a student snapshot."""

    users: np.ndarray  # (n,) test users
    items: np.ndarray  # (n,) test items
    diffs: np.ndarray  # (n,) rank_T - rank_S on the test interactions
    diffs_sorted: np.ndarray  # ascending series
    student_win_fraction: float  # fraction with diff > 0 (strict)
    avg_rank_difference: float
    scatter_rank_s: np.ndarray
    scatter_rank_t: np.ndarray


def rank_diff_report(
    snap_t: RankSnapshot,
    snap_s: RankSnapshot,
    test_item: np.ndarray,
    scatter_top_r: int = 1000,
) -> RankDiffReport:
    """Rank-difference series on the test interactions plus a rank scatter.

    The scatter holds every (rank_S, rank_T) candidate pair where either
    model ranks the item within the top ``scatter_top_r``.
    """
    n, m = snap_t.n, snap_t.m
    users = np.arange(n)
    rt = snap_t.rank_of[users, test_item].astype(np.int64)
    rs = snap_s.rank_of[users, test_item].astype(np.int64)
    if np.any(rt == 0) or np.any(rs == 0):
        raise ValueError("a test item is not a candidate in one of the snapshots")
    diffs = rt - rs

    cand = snap_t.rank_of > 0
    near_top = cand & ((snap_t.rank_of <= scatter_top_r) | (snap_s.rank_of <= scatter_top_r))
    scatter_t = snap_t.rank_of[near_top].astype(np.int64)
    scatter_s = snap_s.rank_of[near_top].astype(np.int64)

    return RankDiffReport(
        users=users,
        items=np.asarray(test_item, dtype=np.int64),
        diffs=diffs,
        diffs_sorted=np.sort(diffs),
        student_win_fraction=float((diffs > 0).mean()) if n else 0.0,
        avg_rank_difference=float(np.abs(diffs).sum() / (n * m)),
        scatter_rank_s=scatter_s,
        scatter_rank_t=scatter_t,
    )


def write_analytics(report: RankDiffReport, out_dir: str | Path) -> None:
    """Emit rankdiff.csv, scatter.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rankdiff.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "diff"])
        for u, i, d in zip(report.users, report.items, report.diffs):
            w.writerow([int(u), int(i), int(d)])
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank_s", "rank_t"])
        for s, t in zip(report.scatter_rank_s, report.scatter_rank_t):
            w.writerow([int(s), int(t)])
    summary = {
        "student_win_fraction": report.student_win_fraction,
        "average_rank_difference": report.avg_rank_difference,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
