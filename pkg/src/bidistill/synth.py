"""Seeded synthetic implicit-feedback generators for experiments where no
real interaction log is available."""
from __future__ import annotations

import numpy as np

from .data import Dataset, RawInteraction, build_dataset

__all__ = ["synthetic_interactions", "ml100k_scale_interactions", "synthetic_dataset"]


def synthetic_interactions(
    n_users: int,
    n_items: int,
    latent_rank: int,
    seed: int,
    min_activity: int = 12,
    max_activity: int = 120,
    popularity_scale: float = 1.0,
    affinity_scale: float = 1.5,
) -> list[RawInteraction]:
    """Draw an interaction log from a low-rank preference model.

    Users and items get latent factors; each user interacts with a random
    number of items drawn without replacement with probability
    proportional to exp(affinity + popularity).  A skewed popularity term
    gives the long-tailed item frequencies typical of implicit feedback.
    No timestamps are attached (splits then use the seeded random rule).
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 1.0, size=(n_users, latent_rank)) / np.sqrt(latent_rank)
    V = rng.normal(0.0, 1.0, size=(n_items, latent_rank))
    popularity = popularity_scale * rng.gumbel(0.0, 1.0, size=n_items)
    logits = affinity_scale * (U @ V.T) + popularity[None, :]

    activity = rng.integers(min_activity, max_activity + 1, size=n_users)
    # exponential race: the k smallest Exp(1)/w are a weighted draw without replacement
    keys = rng.exponential(1.0, size=(n_users, n_items)) / np.exp(logits - logits.max())
    rows: list[RawInteraction] = []
    for u in range(n_users):
        k = int(activity[u])
        picked = np.argpartition(keys[u], k)[:k]
        for i in np.sort(picked):
            rows.append(RawInteraction(f"u{u}", f"i{i}", None))
    return rows


def ml100k_scale_interactions(seed: int = 0) -> list[RawInteraction]:
    """A stand-in log at the scale of the small public benchmark:
    943 users, 1682 items, long-tailed activity."""
    return synthetic_interactions(
        n_users=943,
        n_items=1682,
        latent_rank=12,
        seed=seed,
        min_activity=15,
        max_activity=150,
    )


def synthetic_dataset(
    n_users: int,
    n_items: int,
    latent_rank: int,
    seed: int,
    min_ratings: int = 5,
    **kwargs,
) -> Dataset:
    """Convenience wrapper: generate, filter and split in one call."""
    rows = synthetic_interactions(n_users, n_items, latent_rank, seed, **kwargs)
    return build_dataset(rows, min_ratings=min_ratings, seed=seed)
