"""Bidirectional distillation loss and the sampling schemes that pick which
unobserved items carry knowledge in each direction.

Teacher-to-student sampling weights saturate (tanh) so the student absorbs
the teacher's predictions across many rank-discrepant items; student-to-
teacher weights grow exponentially so the teacher only follows items the
student is very confident about.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .models import CLIP, FactorModel, SparseGrads, _coalesce_block, _empty_grads
from .ranking import RankSnapshot

__all__ = [
    "Direction",
    "SamplingScheme",
    "DistillConfig",
    "SnapshotSampler",
    "weight_t_to_s",
    "weight_s_to_t",
    "sample_items",
    "sample_items_baseline",
    "sampling_distribution",
    "bd_loss",
    "bd_loss_batch",
]


class Direction(Enum):
    T_TO_S = "t_to_s"  # teacher teaches student
    S_TO_T = "s_to_t"  # student teaches teacher


class SamplingScheme(Enum):
    RANK_DISCREPANCY = "rank-discrepancy"
    RANK_AWARE = "rank-aware"
    TOP_N = "top-n"
    UNIFORM = "uniform"
    SWAPPED = "swapped-rank-discrepancy"


@dataclass
class DistillConfig:
    """Hyperparameters of the bidirectional distillation."""

    lambda_ts: float = 0.5  # weight of the T->S loss on the student
    lambda_st: float = 0.5  # weight of the S->T loss on the teacher
    temperature: float = 2.0
    eps_t: float = 1e-4  # tanh smoothness
    eps_e: float = 1e-4  # exp smoothness
    n_samples: int = 10  # items drawn per interaction and direction
    scheme: SamplingScheme = SamplingScheme.RANK_DISCREPANCY
    rank_aware_cutoff: int | None = None  # truncate rank-aware weights, None = full list
    # Optionally source the CF negatives from the distillation draw instead of
    # uniform sampling.  Off by default: hard zero labels on the counterpart's
    # top items fight the distillation pull and consistently hurt the learner.
    reuse_negatives: bool = False

    def validate(self) -> None:
        if self.lambda_ts < 0 or self.lambda_st < 0:
            raise ValueError("distillation weights must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.eps_t <= 0 or self.eps_e <= 0:
            raise ValueError("smoothness factors must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def weight_t_to_s(rank_t, rank_s, eps_t: float):
    """tanh(max((rank_S - rank_T) * eps_t, 0)).

    Zero whenever the student already ranks the item at least as high as
    the teacher; saturates toward 1 for large discrepancies.
    """
    rank_t = np.asarray(rank_t, dtype=np.float64)
    rank_s = np.asarray(rank_s, dtype=np.float64)
    return np.tanh(np.maximum((rank_s - rank_t) * eps_t, 0.0))


def weight_s_to_t(rank_t, rank_s, eps_e: float):
    """exp((rank_T - rank_S) * eps_e); strictly increasing in the
    discrepancy and never exactly zero.

    Sampling normalizes these weights in log-space with a max shift, so
    overflow here is only a concern for direct calls with huge arguments.
    """
    rank_t = np.asarray(rank_t, dtype=np.float64)
    rank_s = np.asarray(rank_s, dtype=np.float64)
    return np.exp((rank_t - rank_s) * eps_e)


def _log_weights(
    scheme: SamplingScheme,
    direction: Direction,
    rank_t: np.ndarray,
    rank_s: np.ndarray,
    config: DistillConfig,
) -> np.ndarray:
    """Unnormalized log-weights over candidates; -inf marks zero weight."""
    with np.errstate(divide="ignore"):
        if scheme is SamplingScheme.RANK_DISCREPANCY:
            if direction is Direction.T_TO_S:
                return np.log(weight_t_to_s(rank_t, rank_s, config.eps_t))
            return (rank_t - rank_s).astype(np.float64) * config.eps_e
        if scheme is SamplingScheme.SWAPPED:
            if direction is Direction.T_TO_S:
                return (rank_s - rank_t).astype(np.float64) * config.eps_e
            return np.log(weight_t_to_s(rank_s, rank_t, config.eps_t))
        if scheme is SamplingScheme.UNIFORM:
            return np.zeros(rank_t.shape, dtype=np.float64)
        if scheme is SamplingScheme.RANK_AWARE:
            teach = rank_t if direction is Direction.T_TO_S else rank_s
            logw = -teach.astype(np.float64) * config.eps_e
            if config.rank_aware_cutoff is not None:
                logw = np.where(teach <= config.rank_aware_cutoff, logw, -np.inf)
            return logw
    raise ValueError(f"scheme {scheme} has no sampling weights")


def _normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    """Probabilities from log-weights via max-shift; all -inf -> all zero."""
    finite = np.isfinite(logw)
    if not finite.any():
        return np.zeros_like(logw)
    w = np.exp(logw - logw[finite].max())
    w[~finite] = 0.0
    return w / w.sum()


def _draw_distinct(
    cum: np.ndarray,
    items: np.ndarray,
    k_pos: int,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw n distinct items with probability proportional to the weights
    behind ``cum`` (normalized cumulative weights over ``items``).

    Duplicates are rejected and redrawn, which reproduces exact sequential
    sampling without replacement.
    """
    if k_pos == 0:
        return np.empty(0, dtype=np.int64)
    if k_pos <= n:
        positive = np.diff(cum, prepend=0.0) > 0
        return np.asarray(items[positive], dtype=np.int64)
    chosen: list[int] = []
    seen: set[int] = set()
    need = n
    guard = 0
    while need > 0:
        guard += 1
        if guard > 10_000:
            raise RuntimeError("sampling failed to collect distinct items")
        pos = int(np.searchsorted(cum, rng.random(), side="right"))
        pos = min(pos, items.size - 1)
        it = int(items[pos])
        if it not in seen:
            seen.add(it)
            chosen.append(it)
            need -= 1
    return np.asarray(chosen, dtype=np.int64)


def _user_tables(
    scheme: SamplingScheme,
    direction: Direction,
    snap_t: RankSnapshot,
    snap_s: RankSnapshot,
    u: int,
    config: DistillConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    """(cumulative probabilities, items in canonical order, positive count)
    for one user.

    Candidates are enumerated in the teaching model's rank order, so the
    draw depends only on the rank structure, not on item labels.
    """
    teaching = snap_t if direction is Direction.T_TO_S else snap_s
    other = snap_s if direction is Direction.T_TO_S else snap_t
    k = int(teaching.n_candidates[u])
    items = teaching.order[u, :k].astype(np.int64)
    rank_teach = np.arange(1, k + 1, dtype=np.int64)
    rank_other = other.rank_of[u, items].astype(np.int64)
    if np.any(rank_other == 0):
        raise ValueError("snapshots disagree on the candidate set")
    if direction is Direction.T_TO_S:
        rank_t, rank_s = rank_teach, rank_other
    else:
        rank_t, rank_s = rank_other, rank_teach
    probs = _normalize_log_weights(_log_weights(scheme, direction, rank_t, rank_s, config))
    k_pos = int((probs > 0).sum())
    cum = np.cumsum(probs)
    if k_pos:
        cum /= cum[-1]
    return cum, items, k_pos


def sample_items(
    direction: Direction,
    snap_t: RankSnapshot,
    snap_s: RankSnapshot,
    u: int,
    n: int,
    config: DistillConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw up to ``n`` distinct distillation items for one user without
    replacement, proportional to the direction's rank-discrepancy weights.

    Returns all positive-weight items when fewer than ``n`` carry weight,
    and an empty array when none do (the caller then skips the
    distillation term for this user).
    """
    scheme = config.scheme
    if scheme is SamplingScheme.TOP_N:
        teaching = snap_t if direction is Direction.T_TO_S else snap_s
        k = int(teaching.n_candidates[u])
        return teaching.order[u, : min(n, k)].astype(np.int64)
    cum, items, k_pos = _user_tables(scheme, direction, snap_t, snap_s, u, config)
    return _draw_distinct(cum, items, k_pos, n, rng)


def sample_items_baseline(
    scheme: SamplingScheme,
    snap_teach: RankSnapshot,
    u: int,
    n: int,
    config: DistillConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unidirectional baseline draw over a frozen teaching model's ranking.

    TOP_N returns the teaching model's top-n candidates exactly; UNIFORM
    draws uniformly; RANK_AWARE draws with probability proportional to
    exp(-rank * eps_e).
    """
    if scheme not in (SamplingScheme.TOP_N, SamplingScheme.UNIFORM, SamplingScheme.RANK_AWARE):
        raise ValueError(f"{scheme} needs both snapshots; use sample_items")
    # the teaching snapshot stands in for both roles: weights only read its ranks
    return sample_items(Direction.T_TO_S, snap_teach, snap_teach, u, n,
                        DistillConfig(temperature=config.temperature, eps_t=config.eps_t,
                                      eps_e=config.eps_e, n_samples=config.n_samples,
                                      scheme=scheme,
                                      rank_aware_cutoff=config.rank_aware_cutoff),
                        rng)


def sampling_distribution(
    scheme: SamplingScheme,
    direction: Direction,
    snap_t: RankSnapshot,
    snap_s: RankSnapshot,
    u: int,
    config: DistillConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(items, rank_T, rank_S, weight, probability) for one user, for
    debugging and the dump-sampling command."""
    teaching = snap_t if direction is Direction.T_TO_S else snap_s
    k = int(teaching.n_candidates[u])
    items = teaching.order[u, :k].astype(np.int64)
    rank_t = snap_t.rank_of[u, items].astype(np.int64)
    rank_s = snap_s.rank_of[u, items].astype(np.int64)
    if scheme is SamplingScheme.TOP_N:
        weights = np.zeros(k)
        weights[: config.n_samples] = 1.0
        probs = weights / weights.sum() if k else weights
    else:
        logw = _log_weights(scheme, direction, rank_t, rank_s, config)
        with np.errstate(over="ignore"):
            weights = np.exp(logw)
        probs = _normalize_log_weights(logw)
    return items, rank_t, rank_s, weights, probs


class SnapshotSampler:
    """Vectorized per-batch sampler over a fixed pair of snapshots.

    Tables are rebuilt whenever the snapshots are refreshed; draws between
    refreshes reuse them.  Each direction owns its RNG stream, so the two
    directions' draws are order-independent.
    """

    def __init__(
        self,
        direction: Direction,
        snap_t: RankSnapshot,
        snap_s: RankSnapshot,
        config: DistillConfig,
        rng: np.random.Generator,
        scheme: SamplingScheme | None = None,
    ):
        self.direction = direction
        self.config = config
        self.rng = rng
        self.scheme = scheme if scheme is not None else config.scheme
        teaching = snap_t if direction is Direction.T_TO_S else snap_s
        other = snap_s if direction is Direction.T_TO_S else snap_t
        self.order = teaching.order
        self.n_candidates = teaching.n_candidates
        n, m = teaching.rank_of.shape
        self._m = m
        if self.scheme is SamplingScheme.TOP_N:
            self.k_pos = np.minimum(self.n_candidates, config.n_samples).astype(np.int64)
            self.flat_cum = None
            return

        pos_idx = np.arange(1, m + 1, dtype=np.int64)[None, :]
        rank_other = np.take_along_axis(other.rank_of, self.order.astype(np.int64), axis=1)
        if direction is Direction.T_TO_S:
            rank_t, rank_s = np.broadcast_to(pos_idx, (n, m)), rank_other
        else:
            rank_t, rank_s = rank_other, np.broadcast_to(pos_idx, (n, m))
        logw = _log_weights(self.scheme, direction, rank_t, rank_s, config)
        # mask enumeration slots beyond the candidate count
        logw = np.where(pos_idx <= self.n_candidates[:, None], logw, -np.inf)

        finite = np.isfinite(logw)
        self.k_pos = finite.sum(axis=1).astype(np.int64)
        shift = np.where(finite.any(axis=1), np.max(np.where(finite, logw, -np.inf), axis=1), 0.0)
        w = np.exp(logw - shift[:, None])
        w[~finite] = 0.0
        cum = np.cumsum(w, axis=1)
        tot = cum[:, -1].copy()
        tot[tot == 0.0] = 1.0
        cum /= tot[:, None]
        cum[self.k_pos == 0] = 1.0  # keep the flat table monotone for empty rows
        # flat table: row u occupies [u*m, (u+1)*m) with values u + local cum
        self.flat_cum = (cum + np.arange(n, dtype=np.float64)[:, None]).ravel()

    def draw(self, u: int, n: int) -> np.ndarray:
        row = self.draw_batch(np.asarray([u], dtype=np.int64), n)[0]
        return row[row >= 0]

    def draw_batch(self, users: np.ndarray, n: int) -> np.ndarray:
        """Draw up to ``n`` distinct items per user; rows are padded
        with -1 after the drawn items."""
        B = users.shape[0]
        out = np.full((B, n), -1, dtype=np.int64)
        if self.scheme is SamplingScheme.TOP_N:
            take = np.minimum(self.n_candidates[users], n)
            for b, (u, k) in enumerate(zip(users, take)):
                out[b, :k] = self.order[u, :k]
            return out

        counts = self.k_pos[users]
        easy = counts > n
        if easy.any():
            rows = np.nonzero(easy)[0]
            uu = users[rows]
            q = uu[:, None].astype(np.float64) + self.rng.random((rows.size, n))
            idx = np.searchsorted(self.flat_cum, q.ravel(), side="right").reshape(rows.size, n)
            local = np.minimum(idx - uu[:, None] * self._m, self._m - 1)
            picked = np.take_along_axis(self.order[uu].astype(np.int64), local, axis=1)
            out[rows] = picked
            if n > 1:  # redraw rows that collected duplicates
                srt = np.sort(picked, axis=1)
                dup_rows = rows[(srt[:, 1:] == srt[:, :-1]).any(axis=1)]
                for b in dup_rows:
                    uniq: set[int] = set()
                    sel: list[int] = []
                    for it in out[b].tolist():
                        if it not in uniq:
                            uniq.add(it)
                            sel.append(it)
                    guard = 0
                    u = int(users[b])
                    while len(sel) < n:
                        guard += 1
                        if guard > 10_000:
                            raise RuntimeError("sampling failed to collect distinct items")
                        pos = int(np.searchsorted(self.flat_cum, u + self.rng.random(),
                                                  side="right"))
                        pos = min(pos - u * self._m, self._m - 1)
                        it = int(self.order[u, pos])
                        if it not in uniq:
                            uniq.add(it)
                            sel.append(it)
                    out[b] = sel
        hard = ~easy & (counts > 0)
        if hard.any():
            for b in np.nonzero(hard)[0]:
                u = int(users[b])
                lo, hi = u * self._m, (u + 1) * self._m
                local_cum = self.flat_cum[lo:hi] - u
                positive = np.diff(local_cum, prepend=0.0) > 0
                items = self.order[u].astype(np.int64)[positive]
                out[b, : items.size] = items
        return out


def bd_loss_batch(
    learner: FactorModel,
    target: FactorModel,
    users: np.ndarray,
    items: np.ndarray,
    temperature: float,
) -> tuple[float, SparseGrads]:
    """Binary distillation loss of the learner against the target's
    temperature-scaled predictions, summed over a batch.

    ``items`` is (B, N) with -1 padding.  With p = sigmoid(z_learner/T) and
    q = sigmoid(z_target/T), each item contributes
    -(q log p + (1-q) log(1-p)); q is a constant (no gradient reaches the
    target) and dL/dz_learner = (p - q)/T.
    """
    valid = items >= 0
    if not valid.any():
        return 0.0, _empty_grads(learner.d)
    safe = np.where(valid, items, 0)
    Pu = learner.P[users]
    z_l = np.einsum("bd,bkd->bk", Pu, learner.Q[safe])
    z_t = np.einsum("bd,bkd->bk", target.P[users], target.Q[safe])
    if learner.b_item is not None:
        z_l = z_l + learner.b_item[safe]
    if target.b_item is not None:
        z_t = z_t + target.b_item[safe]
    p = expit(z_l / temperature)
    q = expit(z_t / temperature)
    pc = np.clip(p, CLIP, 1.0 - CLIP)
    loss = float((-(q * np.log(pc) + (1.0 - q) * np.log(1.0 - pc)) * valid).sum())

    g = (p - q) / temperature * valid  # (B, N)
    du = np.einsum("bk,bkd->bd", g, learner.Q[safe])
    user_idx, user_grad = _coalesce_block(users, du)
    item_idx = safe[valid]
    item_grad = g[valid][:, None] * np.repeat(Pu, valid.sum(axis=1), axis=0)
    item_idx, item_grad = _coalesce_block(item_idx, item_grad)
    if learner.b_item is not None:
        bias_idx, bias_grad = _coalesce_block(safe[valid], g[valid])
    else:
        bias_idx = np.empty(0, dtype=np.int64)
        bias_grad = np.empty(0)
    return loss, SparseGrads(user_idx, user_grad, item_idx, item_grad, bias_idx, bias_grad)


def bd_loss(
    learner: FactorModel,
    target: FactorModel,
    u: int,
    items: np.ndarray,
    temperature: float,
) -> tuple[float, SparseGrads]:
    """Distillation loss for one user's sampled items; gradients only for
    the learner."""
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    users = np.array([u], dtype=np.int64)
    return bd_loss_batch(learner, target, users, items[None, :], temperature)
