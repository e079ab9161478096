"""Interaction-log ingestion, activity filtering, dense indexing and the
leave-one-out train/validation/test split."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RawInteraction",
    "Dataset",
    "load_interactions",
    "build_dataset",
    "leave_one_out_split",
]


@dataclass(frozen=True)
class RawInteraction:
    """One deduplicated (user, item) event from the input log."""

    user_key: str
    item_key: str
    timestamp: int | None = None


def load_interactions(
    path: str | Path,
    delimiter: str | None = None,
    third_column: str = "rating",
) -> list[RawInteraction]:
    """Parse a delimiter-separated interaction log.

    Expected columns are ``user, item[, rating][, timestamp]``; ratings are
    ignored (implicit feedback).  With exactly three columns the third is
    interpreted per ``third_column`` ("rating" or "timestamp").  The
    delimiter is auto-detected from the first line (tab, then comma) when
    not given.  Duplicate (user, item) pairs are collapsed to a single
    interaction keeping the earliest timestamp.
    """
    if third_column not in ("rating", "timestamp"):
        raise ValueError(f"third_column must be 'rating' or 'timestamp', got {third_column!r}")
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise ValueError(f"{path}: empty interaction file")

    seen: dict[tuple[str, str], int] = {}  # (user, item) -> position of first occurrence
    rows: list[RawInteraction] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if delimiter is None:
            delimiter = "\t" if "\t" in line else ","
        fields = line.split(delimiter)
        if len(fields) < 2:
            raise ValueError(f"{path}: line {lineno}: expected at least 2 fields, got {len(fields)}")
        user, item = fields[0].strip(), fields[1].strip()
        if not user or not item:
            raise ValueError(f"{path}: line {lineno}: empty user or item field")
        ts: int | None = None
        ts_field = None
        if len(fields) >= 4:
            ts_field = fields[3]
        elif len(fields) == 3 and third_column == "timestamp":
            ts_field = fields[2]
        if ts_field is not None:
            try:
                ts = int(float(ts_field))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad timestamp {ts_field!r}") from None

        key = (user, item)
        if key in seen:
            pos = seen[key]
            old = rows[pos]
            if ts is not None and (old.timestamp is None or ts < old.timestamp):
                rows[pos] = RawInteraction(user, item, ts)
        else:
            seen[key] = len(rows)
            rows.append(RawInteraction(user, item, ts))
    if not rows:
        raise ValueError(f"{path}: no interactions parsed")
    return rows


@dataclass
class Dataset:
    """Densely indexed implicit-feedback dataset with a per-user
    leave-one-out split.

    ``train_pos[u]`` holds the sorted observed item indices of user ``u``
    minus the two held-out items; ``val_item[u]`` and ``test_item[u]`` hold
    the held-out items.  ``seed`` is the split seed (used only when the log
    carries no timestamps).
    """

    n: int
    m: int
    train_pos: list[np.ndarray]
    val_item: np.ndarray
    test_item: np.ndarray
    user_index: dict[str, int]
    item_index: dict[str, int]
    seed: int = 0
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)

    @property
    def num_interactions(self) -> int:
        """Total deduplicated interactions of surviving users."""
        return sum(len(p) for p in self.train_pos) + 2 * self.n

    @property
    def sparsity(self) -> float:
        return 1.0 - self.num_interactions / (self.n * self.m)

    def observed_mask(self) -> np.ndarray:
        """(n, m) boolean matrix of training-set positives."""
        mask = np.zeros((self.n, self.m), dtype=bool)
        for u, pos in enumerate(self.train_pos):
            mask[u, pos] = True
        return mask

    def save(self, path: str | Path) -> None:
        """Write a JSON snapshot of the split, seed included."""
        payload = {
            "format": "bidistill-dataset",
            "version": 1,
            "n": self.n,
            "m": self.m,
            "seed": self.seed,
            "users": self.users,
            "items": self.items,
            "train_pos": [p.tolist() for p in self.train_pos],
            "val_item": self.val_item.tolist(),
            "test_item": self.test_item.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != "bidistill-dataset":
            raise ValueError(f"{path}: not a dataset snapshot")
        users = payload["users"]
        items = payload["items"]
        return cls(
            n=payload["n"],
            m=payload["m"],
            train_pos=[np.asarray(p, dtype=np.int64) for p in payload["train_pos"]],
            val_item=np.asarray(payload["val_item"], dtype=np.int64),
            test_item=np.asarray(payload["test_item"], dtype=np.int64),
            user_index={u: k for k, u in enumerate(users)},
            item_index={i: k for k, i in enumerate(items)},
            seed=payload["seed"],
            users=users,
            items=items,
        )


def leave_one_out_split(
    user_rows: dict[int, list[tuple[int, int | None]]],
    seed: int = 0,
) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Split each user's (item, timestamp) list into train / val / test.

    With timestamps on every row the interactions are ordered by
    (timestamp, item index) ascending: the last item is the test item, the
    second to last the validation item.  Without full timestamps two items
    are drawn uniformly at random under ``seed`` (first draw = test, second
    = val).  Users are processed in ascending index order.
    """
    n = len(user_rows)
    train_pos: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    val_item = np.empty(n, dtype=np.int64)
    test_item = np.empty(n, dtype=np.int64)

    all_timestamped = all(ts is not None for rows in user_rows.values() for _, ts in rows)
    rng = np.random.default_rng(seed)

    for u in sorted(user_rows):
        rows = user_rows[u]
        if len(rows) < 3:
            raise ValueError(f"user {u}: needs >= 3 interactions to split, has {len(rows)}")
        items = np.array([i for i, _ in rows], dtype=np.int64)
        if all_timestamped:
            ts = np.array([t for _, t in rows], dtype=np.int64)
            order = np.lexsort((items, ts))
            test_item[u] = items[order[-1]]
            val_item[u] = items[order[-2]]
            train = np.delete(items, [order[-1], order[-2]])
        else:
            picked = rng.choice(len(items), size=2, replace=False)
            test_item[u] = items[picked[0]]
            val_item[u] = items[picked[1]]
            train = np.delete(items, picked)
        train_pos[u] = np.sort(train)
    return train_pos, val_item, test_item


def build_dataset(
    rows: list[RawInteraction],
    min_ratings: int,
    seed: int = 0,
) -> Dataset:
    """Filter low-activity users, index densely and split leave-one-out.

    Users with fewer than ``min_ratings`` deduplicated interactions are
    dropped in a single pass before splitting; items seen only by dropped
    users leave the index.  Indices follow first appearance in ``rows``.
    """
    if min_ratings < 1:
        raise ValueError("min_ratings must be >= 1")
    if not rows:
        raise ValueError("no interactions given")

    # defensively deduplicate (keep earliest timestamp, first-occurrence order)
    seen: dict[tuple[str, str], int] = {}
    dedup: list[RawInteraction] = []
    for r in rows:
        key = (r.user_key, r.item_key)
        if key in seen:
            old = dedup[seen[key]]
            if r.timestamp is not None and (old.timestamp is None or r.timestamp < old.timestamp):
                dedup[seen[key]] = r
        else:
            seen[key] = len(dedup)
            dedup.append(r)

    counts: dict[str, int] = {}
    for r in dedup:
        counts[r.user_key] = counts.get(r.user_key, 0) + 1
    surviving = [r for r in dedup if counts[r.user_key] >= min_ratings]
    if not surviving:
        raise ValueError(f"no user has >= {min_ratings} interactions")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for r in surviving:
        if r.user_key not in user_index:
            user_index[r.user_key] = len(user_index)
        if r.item_key not in item_index:
            item_index[r.item_key] = len(item_index)

    user_rows: dict[int, list[tuple[int, int | None]]] = {u: [] for u in range(len(user_index))}
    for r in surviving:
        user_rows[user_index[r.user_key]].append((item_index[r.item_key], r.timestamp))

    train_pos, val_item, test_item = leave_one_out_split(user_rows, seed=seed)

    users = [None] * len(user_index)
    items = [None] * len(item_index)
    for k, u in user_index.items():
        users[u] = k
    for k, i in item_index.items():
        items[i] = k

    return Dataset(
        n=len(user_index),
        m=len(item_index),
        train_pos=train_pos,
        val_item=val_item,
        test_item=test_item,
        user_index=user_index,
        item_index=item_index,
        seed=seed,
        users=users,  # type: ignore[arg-type]
        items=items,  # type: ignore[arg-type]
    )
