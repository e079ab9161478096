"""Leave-one-out full-ranking evaluation (H@K, N@K), multi-run aggregation
and paired significance testing."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset
from .models import FactorModel, score_matrix

__all__ = [
    "EvalReport",
    "AggregateReport",
    "TTestResult",
    "evaluate",
    "aggregate_runs",
    "paired_t_test",
]


@dataclass
class EvalReport:
    """Per-K metric means plus the per-user vectors they average."""

    ks: tuple[int, ...]
    hit: dict[int, float]
    ndcg: dict[int, float]
    per_user_hit: dict[int, np.ndarray]
    per_user_ndcg: dict[int, np.ndarray]
    ranks: np.ndarray
    model_label: str = ""
    seed: int | None = None
    runtime: float = 0.0

    def to_dict(self) -> dict:
        return {
            "model": self.model_label,
            "seed": self.seed,
            "runtime": self.runtime,
            "ks": list(self.ks),
            "hit": {str(k): v for k, v in self.hit.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def append_csv_rows(self, writer: "csv._writer") -> None:
        """One flat row per (model, K, metric, seed)."""
        for k in self.ks:
            writer.writerow([self.model_label, k, "hit", self.seed, self.hit[k]])
            writer.writerow([self.model_label, k, "ndcg", self.seed, self.ndcg[k]])


def evaluate(
    model: FactorModel,
    dataset: Dataset,
    ks: tuple[int, ...] = (50, 100),
    split: str = "test",
    model_label: str = "",
    seed: int | None = None,
) -> EvalReport:
    """Rank each user's held-out item against all unobserved candidates.

    For the test split the validation item is excluded from the candidates
    (it was used for model selection); for the val split the test item is
    excluded.  H@K is 1 iff the rank is <= K; N@K is 1/log2(rank+1) when
    ranked, else 0.
    """
    if split not in ("test", "val"):
        raise ValueError("split must be 'test' or 'val'")
    t0 = time.perf_counter()
    n, m = dataset.n, dataset.m
    target = dataset.test_item if split == "test" else dataset.val_item
    excluded = dataset.val_item if split == "test" else dataset.test_item

    users = np.arange(n)
    cand = ~dataset.observed_mask()
    cand[users, excluded] = False

    scores = score_matrix(model)
    s_t = scores[users, target]
    higher = ((scores > s_t[:, None]) & cand).sum(axis=1)
    idx = np.arange(m)[None, :]
    tie = ((scores == s_t[:, None]) & cand & (idx < target[:, None])).sum(axis=1)
    ranks = 1 + higher + tie

    hit: dict[int, float] = {}
    ndcg: dict[int, float] = {}
    per_user_hit: dict[int, np.ndarray] = {}
    per_user_ndcg: dict[int, np.ndarray] = {}
    for k in ks:
        h = (ranks <= k).astype(np.float64)
        nd = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
        per_user_hit[k] = h
        per_user_ndcg[k] = nd
        hit[k] = float(h.mean())
        ndcg[k] = float(nd.mean())

    return EvalReport(
        ks=tuple(ks), hit=hit, ndcg=ndcg,
        per_user_hit=per_user_hit, per_user_ndcg=per_user_ndcg,
        ranks=ranks, model_label=model_label, seed=seed,
        runtime=time.perf_counter() - t0,
    )


@dataclass
class AggregateReport:
    """Arithmetic mean of several runs' reports, per-run values retained."""

    ks: tuple[int, ...]
    hit: dict[int, float]
    ndcg: dict[int, float]
    runs: list[EvalReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "hit": {str(k): v for k, v in self.hit.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "runs": [r.to_dict() for r in self.runs],
        }


def aggregate_runs(reports: list[EvalReport]) -> AggregateReport:
    if not reports:
        raise ValueError("need at least one report")
    ks = reports[0].ks
    for r in reports[1:]:
        if r.ks != ks:
            raise ValueError(f"mismatched K lists: {r.ks} vs {ks}")
    hit = {k: float(np.mean([r.hit[k] for r in reports])) for k in ks}
    ndcg = {k: float(np.mean([r.ndcg[k] for r in reports])) for k in ks}
    return AggregateReport(ks=ks, hit=hit, ndcg=ndcg, runs=list(reports))


@dataclass
class TTestResult:
    t: float
    p_value: float
    df: int
    degenerate: bool = False


def paired_t_test(a: np.ndarray, b: np.ndarray) -> TTestResult:
    """Two-sided paired t-test on equal-length per-user metric vectors.

    Zero variance of the differences is degenerate: identical samples get
    t = 0 and p = 1 by convention; a constant nonzero shift has an
    undefined p-value (NaN), both flagged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two equal-length 1-d vectors")
    if a.size < 2:
        raise ValueError("need at least 2 paired observations")
    d = a - b
    df = d.size - 1
    sd = d.std(ddof=1)
    if sd == 0.0:
        if d[0] == 0.0:
            return TTestResult(t=0.0, p_value=1.0, df=df, degenerate=True)
        return TTestResult(t=np.inf if d[0] > 0 else -np.inf, p_value=float("nan"),
                           df=df, degenerate=True)
    t = float(d.mean() / (sd / np.sqrt(d.size)))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return TTestResult(t=t, p_value=p, df=df)
