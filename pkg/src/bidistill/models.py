"""Matrix-factorization recommenders (point-wise and pair-wise), their
collaborative-filtering losses with sparse analytic gradients, and a
self-contained Adam optimizer with lazy per-row updates."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "FactorModel",
    "AdamState",
    "SparseGrads",
    "init_model",
    "logit",
    "predict",
    "score_items",
    "score_matrix",
    "cf_loss_pointwise",
    "cf_loss_pairwise",
    "pointwise_loss_batch",
    "pairwise_loss_batch",
    "init_adam",
    "adam_step",
    "save_model",
    "load_model",
    "CLIP",
]

CLIP = 1e-7  # probability clamp for log-loss stability

POINTWISE = "pointwise"
PAIRWISE = "pairwise"


@dataclass
class FactorModel:
    """Embedding-table recommender: score(u, i) = P[u]·Q[i] + b_item[i]."""

    P: np.ndarray  # (n, d) user factors
    Q: np.ndarray  # (m, d) item factors
    b_item: np.ndarray | None  # (m,) item biases, optional
    loss_kind: str = POINTWISE
    seed: int = 0

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.P.shape[1]

    @property
    def param_count(self) -> int:
        count = self.P.size + self.Q.size
        if self.b_item is not None:
            count += self.b_item.size
        return count

    def copy(self) -> "FactorModel":
        return FactorModel(
            P=self.P.copy(),
            Q=self.Q.copy(),
            b_item=None if self.b_item is None else self.b_item.copy(),
            loss_kind=self.loss_kind,
            seed=self.seed,
        )


def init_model(
    n: int,
    m: int,
    d: int,
    seed: int,
    init_scale: float = 0.01,
    loss_kind: str = POINTWISE,
    use_item_bias: bool = True,
) -> FactorModel:
    """Draw factors i.i.d. Normal(0, init_scale^2); biases start at zero."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    if loss_kind not in (POINTWISE, PAIRWISE):
        raise ValueError(f"unknown loss_kind {loss_kind!r}")
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, init_scale, size=(n, d))
    Q = rng.normal(0.0, init_scale, size=(m, d))
    b = np.zeros(m) if use_item_bias else None
    return FactorModel(P=P, Q=Q, b_item=b, loss_kind=loss_kind, seed=seed)


def logit(model: FactorModel, u: int, i: int) -> float:
    """z_ui = P[u]·Q[i] + b[i]."""
    z = float(model.P[u] @ model.Q[i])
    if model.b_item is not None:
        z += float(model.b_item[i])
    return z


def score_items(model: FactorModel, u: int, items: np.ndarray) -> np.ndarray:
    """Logits of several items for one user."""
    z = model.Q[items] @ model.P[u]
    if model.b_item is not None:
        z = z + model.b_item[items]
    return z


def score_matrix(model: FactorModel) -> np.ndarray:
    """Full (n, m) logit matrix."""
    z = model.P @ model.Q.T
    if model.b_item is not None:
        z = z + model.b_item[None, :]
    return z


def predict(model: FactorModel, u: int, i: int, temperature: float = 1.0) -> float:
    """P(r_ui = 1) = sigmoid(z_ui / T).  The CF losses use T = 1; only the
    distillation path passes a larger temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return float(expit(logit(model, u, i) / temperature))


def _clip(p: np.ndarray) -> np.ndarray:
    return np.clip(p, CLIP, 1.0 - CLIP)


@dataclass
class SparseGrads:
    """Gradients for the parameter rows touched by one batch.

    Row indices are unique within each block; missing blocks are empty
    arrays.  ``bias_idx``/``bias_grad`` are ignored by models without an
    item bias.
    """

    user_idx: np.ndarray
    user_grad: np.ndarray  # (len(user_idx), d)
    item_idx: np.ndarray
    item_grad: np.ndarray  # (len(item_idx), d)
    bias_idx: np.ndarray
    bias_grad: np.ndarray  # (len(bias_idx),)

    def scaled(self, factor: float) -> "SparseGrads":
        return SparseGrads(
            self.user_idx, self.user_grad * factor,
            self.item_idx, self.item_grad * factor,
            self.bias_idx, self.bias_grad * factor,
        )


def _coalesce_block(idx: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum gradient rows sharing an index; return unique indices."""
    if idx.size == 0:
        return idx, grad
    order = np.argsort(idx, kind="stable")
    si = idx[order]
    sg = grad[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(si)) + 1])
    return si[starts], np.add.reduceat(sg, starts, axis=0)


def coalesce(*parts: SparseGrads) -> SparseGrads:
    """Merge several SparseGrads (already scaled) into one with unique rows."""
    if len(parts) == 1:
        return parts[0]
    ui = np.concatenate([p.user_idx for p in parts])
    ug = np.concatenate([p.user_grad for p in parts])
    ii = np.concatenate([p.item_idx for p in parts])
    ig = np.concatenate([p.item_grad for p in parts])
    bi = np.concatenate([p.bias_idx for p in parts])
    bg = np.concatenate([p.bias_grad for p in parts])
    ui, ug = _coalesce_block(ui, ug)
    ii, ig = _coalesce_block(ii, ig)
    bi, bg = _coalesce_block(bi, bg)
    return SparseGrads(ui, ug, ii, ig, bi, bg)


def _empty_grads(d: int) -> SparseGrads:
    return SparseGrads(
        np.empty(0, dtype=np.int64), np.empty((0, d)),
        np.empty(0, dtype=np.int64), np.empty((0, d)),
        np.empty(0, dtype=np.int64), np.empty(0),
    )


def pointwise_loss_batch(
    model: FactorModel,
    users: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
) -> tuple[float, SparseGrads]:
    """Binary cross-entropy over a batch of interactions.

    ``users``/``pos`` are (B,); ``neg`` is (B, K) with -1 marking padded
    slots.  Loss is the sum of -log sigma(z) over positives and
    -log(1 - sigma(z)) over valid negatives; gradients cover only the
    touched rows of P, Q and b.
    """
    B = users.shape[0]
    Pu = model.P[users]  # (B, d)

    z_pos = np.einsum("bd,bd->b", Pu, model.Q[pos])
    if model.b_item is not None:
        z_pos = z_pos + model.b_item[pos]
    p_pos = expit(z_pos)

    valid = neg >= 0
    neg_safe = np.where(valid, neg, 0)
    z_neg = np.einsum("bd,bkd->bk", Pu, model.Q[neg_safe])
    if model.b_item is not None:
        z_neg = z_neg + model.b_item[neg_safe]
    p_neg = expit(z_neg)

    loss = -np.log(_clip(p_pos)).sum()
    loss += -(np.log(_clip(1.0 - p_neg)) * valid).sum()

    # dL/dz: sigma(z) - y, masked for padding
    g_pos = p_pos - 1.0  # (B,)
    g_neg = p_neg * valid  # (B, K)

    du = g_pos[:, None] * model.Q[pos] + np.einsum("bk,bkd->bd", g_neg, model.Q[neg_safe])
    user_idx, user_grad = _coalesce_block(users, du)

    item_idx = np.concatenate([pos, neg_safe[valid]])
    item_grad = np.concatenate([g_pos[:, None] * Pu,
                                g_neg[valid][:, None] * np.repeat(Pu, valid.sum(axis=1), axis=0)])
    item_idx, item_grad = _coalesce_block(item_idx, item_grad)

    if model.b_item is not None:
        bias_idx = np.concatenate([pos, neg_safe[valid]])
        bias_grad = np.concatenate([g_pos, g_neg[valid]])
        bias_idx, bias_grad = _coalesce_block(bias_idx, bias_grad)
    else:
        bias_idx = np.empty(0, dtype=np.int64)
        bias_grad = np.empty(0)

    return float(loss), SparseGrads(user_idx, user_grad, item_idx, item_grad, bias_idx, bias_grad)


def pairwise_loss_batch(
    model: FactorModel,
    users: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
) -> tuple[float, SparseGrads]:
    """BPR loss sum of -log sigma(z_ui - z_uj) over all (pos, neg) pairs.

    Shapes as in :func:`pointwise_loss_batch`.
    """
    Pu = model.P[users]
    z_pos = np.einsum("bd,bd->b", Pu, model.Q[pos])
    valid = neg >= 0
    neg_safe = np.where(valid, neg, 0)
    z_neg = np.einsum("bd,bkd->bk", Pu, model.Q[neg_safe])
    if model.b_item is not None:
        z_pos = z_pos + model.b_item[pos]
        z_neg = z_neg + model.b_item[neg_safe]

    delta = z_pos[:, None] - z_neg  # (B, K)
    s = expit(delta)
    loss = float(-(np.log(_clip(s)) * valid).sum())

    g = (s - 1.0) * valid  # dL/d(delta), (B, K)
    g_row = g.sum(axis=1)  # total dL/dz_pos per interaction

    du = g_row[:, None] * model.Q[pos] - np.einsum("bk,bkd->bd", g, model.Q[neg_safe])
    user_idx, user_grad = _coalesce_block(users, du)

    item_idx = np.concatenate([pos, neg_safe[valid]])
    item_grad = np.concatenate([g_row[:, None] * Pu,
                                (-g[valid])[:, None] * np.repeat(Pu, valid.sum(axis=1), axis=0)])
    item_idx, item_grad = _coalesce_block(item_idx, item_grad)

    if model.b_item is not None:
        bias_idx = np.concatenate([pos, neg_safe[valid]])
        bias_grad = np.concatenate([g_row, -g[valid]])
        bias_idx, bias_grad = _coalesce_block(bias_idx, bias_grad)
    else:
        bias_idx = np.empty(0, dtype=np.int64)
        bias_grad = np.empty(0)

    return loss, SparseGrads(user_idx, user_grad, item_idx, item_grad, bias_idx, bias_grad)


def cf_loss_pointwise(
    model: FactorModel,
    u: int,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
) -> tuple[float, SparseGrads]:
    """Point-wise CF loss for one user: positives labeled 1, sampled
    unobserved items labeled 0."""
    pos_items = np.atleast_1d(np.asarray(pos_items, dtype=np.int64))
    neg_items = np.atleast_1d(np.asarray(neg_items, dtype=np.int64))
    users = np.full(pos_items.shape[0], u, dtype=np.int64)
    # spread the negatives over the positive rows (padded rectangular layout)
    K = int(np.ceil(neg_items.size / pos_items.size)) if neg_items.size else 0
    neg = np.full((pos_items.size, max(K, 1)), -1, dtype=np.int64)
    for k, j in enumerate(neg_items):
        neg[k % pos_items.size, k // pos_items.size] = j
    return pointwise_loss_batch(model, users, pos_items, neg)


def cf_loss_pairwise(
    model: FactorModel,
    u: int,
    pos_item: int,
    neg_item: int,
) -> tuple[float, SparseGrads]:
    """Pair-wise CF loss for one (user, pos, neg) triple."""
    users = np.array([u], dtype=np.int64)
    pos = np.array([pos_item], dtype=np.int64)
    neg = np.array([[neg_item]], dtype=np.int64)
    return pairwise_loss_batch(model, users, pos, neg)


@dataclass
class AdamState:
    """Per-parameter Adam moments with a single global step counter.

    Moments are updated lazily, only on the rows touched by a batch; bias
    correction uses the global step.  L2 is added to the gradient of the
    touched rows only.
    """

    lr: float
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    mP: np.ndarray = field(default=None)  # type: ignore[assignment]
    vP: np.ndarray = field(default=None)  # type: ignore[assignment]
    mQ: np.ndarray = field(default=None)  # type: ignore[assignment]
    vQ: np.ndarray = field(default=None)  # type: ignore[assignment]
    mb: np.ndarray | None = None
    vb: np.ndarray | None = None


def init_adam(model: FactorModel, lr: float, l2: float = 0.0) -> AdamState:
    state = AdamState(lr=lr, l2=l2)
    state.mP = np.zeros_like(model.P)
    state.vP = np.zeros_like(model.P)
    state.mQ = np.zeros_like(model.Q)
    state.vQ = np.zeros_like(model.Q)
    if model.b_item is not None:
        state.mb = np.zeros_like(model.b_item)
        state.vb = np.zeros_like(model.b_item)
    return state


def _adam_block(
    opt: AdamState,
    param: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    idx: np.ndarray,
    grad: np.ndarray,
    block: str,
) -> None:
    if idx.size == 0:
        return
    if not np.isfinite(grad.sum()) and not np.all(np.isfinite(grad)):
        bad = idx[~np.isfinite(grad).reshape(grad.shape[0], -1).all(axis=1)]
        raise RuntimeError(
            f"non-finite gradient in {block} rows {bad[:8].tolist()} at adam step {opt.step}"
        )
    rows = param[idx]
    g = grad + opt.l2 * rows
    mi = m[idx]
    vi = v[idx]
    mi *= opt.beta1
    mi += (1.0 - opt.beta1) * g
    vi *= opt.beta2
    vi += (1.0 - opt.beta2) * (g * g)
    m[idx] = mi
    v[idx] = vi
    mhat = mi / (1.0 - opt.beta1 ** opt.step)
    vhat = vi / (1.0 - opt.beta2 ** opt.step)
    rows -= opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    if not np.isfinite(rows.sum()) and not np.all(np.isfinite(rows)):
        raise RuntimeError(f"non-finite parameter in {block} after adam step {opt.step}")
    param[idx] = rows


def adam_step(opt: AdamState, model: FactorModel, grads: SparseGrads) -> None:
    """Apply one bias-corrected Adam update to the touched rows."""
    opt.step += 1
    _adam_block(opt, model.P, opt.mP, opt.vP, grads.user_idx, grads.user_grad, "P")
    _adam_block(opt, model.Q, opt.mQ, opt.vQ, grads.item_idx, grads.item_grad, "Q")
    if model.b_item is not None and grads.bias_idx.size:
        _adam_block(opt, model.b_item, opt.mb, opt.vb, grads.bias_idx, grads.bias_grad, "b_item")


CHECKPOINT_VERSION = 1


def save_model(model: FactorModel, path: str | Path) -> None:
    """Versioned binary checkpoint (npz) of all parameters and metadata."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "n": np.array(model.n),
        "m": np.array(model.m),
        "d": np.array(model.d),
        "seed": np.array(model.seed),
        "loss_kind": np.array(model.loss_kind),
        "P": model.P,
        "Q": model.Q,
        "has_bias": np.array(model.b_item is not None),
    }
    if model.b_item is not None:
        arrays["b_item"] = model.b_item
    np.savez(path, **arrays)


def load_model(path: str | Path) -> FactorModel:
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(z['version'])}")
        b = z["b_item"] if bool(z["has_bias"]) else None
        return FactorModel(
            P=z["P"],
            Q=z["Q"],
            b_item=b,
            loss_kind=str(z["loss_kind"]),
            seed=int(z["seed"]),
        )
