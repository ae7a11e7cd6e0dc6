"""Synthetic corpora with planted cluster structure for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .data import EmbeddingTable, InteractionCorpus, UserRecord


def item_cluster(item_index: int, n_items: int, n_clusters: int) -> int:
    """Contiguous block assignment of items to clusters."""
    return item_index * n_clusters // n_items


def make_synthetic_corpus(
    n_users: int = 2000,
    n_items: int = 200,
    n_clusters: int = 20,
    seed: int = 0,
    min_len: int = 8,
    max_len: int = 16,
    next_prob: float = 0.8,
) -> InteractionCorpus:
    """Random walks over clusters: with next_prob move to the successor cluster,
    otherwise jump uniformly; the item within a cluster is uniform."""
    rng = np.random.default_rng(seed)
    items = [f"i{j:04d}" for j in range(n_items)]
    members: list[list[str]] = [[] for _ in range(n_clusters)]
    for j, item in enumerate(items):
        members[item_cluster(j, n_items, n_clusters)].append(item)
    users = []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        cluster = int(rng.integers(n_clusters))
        seq = []
        for _ in range(length):
            seq.append(members[cluster][int(rng.integers(len(members[cluster])))])
            if rng.random() < next_prob:
                cluster = (cluster + 1) % n_clusters
            else:
                cluster = int(rng.integers(n_clusters))
        users.append(
            UserRecord(user_id=f"u{u:05d}", items=tuple(seq), timestamps=tuple(range(length)))
        )
    return InteractionCorpus(users=tuple(users))


def planted_cluster_embeddings(
    n_items: int,
    n_clusters: int,
    dim: int,
    noise: float = 0.1,
    seed: int = 0,
    spread: float = 1.0,
) -> tuple[EmbeddingTable, dict[str, int]]:
    """Per-item vectors drawn around one center per cluster; returns the label map too."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(n_clusters, dim))
    rows = {}
    labels = {}
    for j in range(n_items):
        item = f"i{j:04d}"
        c = item_cluster(j, n_items, n_clusters)
        labels[item] = c
        rows[item] = (centers[c] + rng.normal(0.0, noise, size=dim)).astype(np.float32)
    return EmbeddingTable(dim=dim, rows=rows), labels
