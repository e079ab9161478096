"""Build a dataset from a raw interaction log and inspect the
leave-one-out split.

Run:  python demos/01_data_and_split.py
"""
import tempfile
from pathlib import Path

import numpy as np

from bidistill import build_dataset, load_interactions
from bidistill.synth import synthetic_interactions

# --- parse a small delimiter-separated log -----------------------------
log = "\n".join(
    f"user{u}\titem{i}\t{5}\t{1000 + 10 * u + i}"  # user, item, rating, timestamp
    for u in range(6)
    for i in np.random.default_rng(u).choice(20, size=6, replace=False)
)
path = Path(tempfile.mkdtemp()) / "log.tsv"
path.write_text(log)

rows = load_interactions(path)
print(f"parsed {len(rows)} interactions, first: {rows[0]}")

ds = build_dataset(rows, min_ratings=5, seed=0)
print(f"dataset: {ds.n} users x {ds.m} items, {ds.num_interactions} interactions")
print(f"sparsity: {ds.sparsity:.2%}")

u = 0
print(f"\nuser 0 split: train={ds.train_pos[u].tolist()}, "
      f"val={ds.val_item[u]}, test={ds.test_item[u]}")
# with timestamps, test is the last interacted item, val the second to last

# --- synthetic logs for experiments without a real dataset -------------
rows = synthetic_interactions(n_users=50, n_items=80, latent_rank=4, seed=1,
                              min_activity=8, max_activity=20)
ds = build_dataset(rows, min_ratings=5, seed=1)
print(f"\nsynthetic: {ds.n} users x {ds.m} items, {ds.num_interactions} interactions")

# the split snapshot (with its seed) can be saved for exact reproduction
out = path.parent / "split.json"
ds.save(out)
print(f"split snapshot written to {out}")
