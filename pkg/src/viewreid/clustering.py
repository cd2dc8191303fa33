"""Pseudo-label generation: cosine distances, k-reciprocal Jaccard
re-ranking, and DBSCAN over the precomputed matrix.

All functions are pure and deterministic; DBSCAN visits points in ascending
index order, so border-point assignment is reproducible.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class ClusterConfig:
    k1: int = 20
    k2: int = 6
    rerank_blend: float = 0.0   # weight of the original distance in the blend
    eps: float = 0.55
    min_samples: int = 4


@dataclass
class PseudoLabeling:
    labels: np.ndarray       # length N; -1 marks noise
    epoch: int
    cluster_count: int

    @property
    def noise_count(self):
        return int((self.labels < 0).sum())


def cosine_distance_matrix(features):
    """1 - cosine similarity, clamped to [0, 2]; exactly symmetric, zero diag."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    fn = f / np.maximum(norms, 1e-12)
    d = 1.0 - fn @ fn.T
    d = np.clip((d + d.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def _k_reciprocal(initial_rank, i, k):
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def k_reciprocal_jaccard(dist, k1=20, k2=6, blend=0.0):
    """Re-ranked distance from overlap of expanded mutual-neighbor sets.

    Membership weights are Gaussian in the original distance; the result is
    ``blend * original + (1 - blend) * jaccard``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not 1 <= k2 <= k1:
        raise ValueError("need 1 <= k2 <= k1")
    if k1 >= n:
        raise ValueError(f"k1={k1} must be smaller than the number of points ({n})")

    initial_rank = np.argsort(dist, axis=1, kind="stable")
    weights = np.zeros((n, n))
    for i in range(n):
        reciprocal = _k_reciprocal(initial_rank, i, k1)
        expanded = reciprocal
        for cand in reciprocal:
            cand_recip = _k_reciprocal(initial_rank, cand, int(round(k1 / 2)))
            if np.intersect1d(cand_recip, reciprocal).size > 2.0 / 3 * cand_recip.size:
                expanded = np.append(expanded, cand_recip)
        expanded = np.unique(expanded)
        w = np.exp(-dist[i, expanded])
        weights[i, expanded] = w / w.sum()

    if k2 != 1:
        weights = np.stack([weights[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((n, n))
    nonzero_cols = [np.flatnonzero(weights[:, j]) for j in range(n)]
    for i in range(n):
        overlap = np.zeros(n)
        for j in np.flatnonzero(weights[i]):
            rows = nonzero_cols[j]
            overlap[rows] += np.minimum(weights[i, j], weights[rows, j])
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    jaccard = (jaccard + jaccard.T) / 2.0
    np.fill_diagonal(jaccard, 0.0)
    out = blend * dist + (1.0 - blend) * jaccard
    np.fill_diagonal(out, 0.0)
    return out


def dbscan(dist, eps, min_samples):
    """Density clustering over a precomputed distance matrix.

    Neighborhoods are closed balls (d <= eps, self included). Clusters are
    grown from core points in ascending index order; border points keep the
    first cluster that reaches them.
    """
    dist = np.asarray(dist)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_samples < 1:
        raise ValueError("min_samples must be at least 1")
    n = dist.shape[0]
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_samples for nb in neighbors])
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neighbors[i])
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(neighbors[j])
        cluster += 1
    return PseudoLabeling(labels=labels, epoch=0, cluster_count=cluster)


def assign_pseudo_labels(features, cfg, epoch=0):
    """Distance -> re-rank -> cluster, the per-epoch label refresh."""
    base = cosine_distance_matrix(features)
    reranked = k_reciprocal_jaccard(base, cfg.k1, cfg.k2, cfg.rerank_blend)
    labeling = dbscan(reranked, cfg.eps, cfg.min_samples)
    labeling.epoch = epoch
    return labeling
