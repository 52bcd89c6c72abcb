"""Label-aware evaluation of learned embeddings.

Features are the l2-normalized mean vectors; uncertainty summaries use the
per-dimension standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class EmbeddingTable:
    features: np.ndarray
    labels: np.ndarray
    sigmas: np.ndarray | None = None

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if f.shape[0] != labels.size:
            raise InvalidArgumentError(f"{f.shape[0]} feature rows but {labels.size} labels")
        if f.size and not np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-6):
            raise InvalidArgumentError("feature rows must be unit-norm")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", labels)
        if self.sigmas is not None:
            s = np.atleast_2d(np.asarray(self.sigmas, dtype=np.float64))
            if s.shape[0] != labels.size:
                raise InvalidArgumentError("sigmas must have one row per feature row")
            object.__setattr__(self, "sigmas", s)

    @classmethod
    def from_mu(cls, mu, labels, sigmas=None) -> "EmbeddingTable":
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        norms = np.linalg.norm(mu, axis=1, keepdims=True)
        return cls(mu / np.where(norms > 0, norms, 1.0), labels, sigmas)

    def __len__(self):
        return self.labels.size


def _vote(sims, labels, top_k, tau):
    order = np.argsort(-sims, kind="stable")[: max(1, min(top_k, sims.size))]
    classes = np.unique(labels[order])
    # shift by the max similarity; the argmax is unchanged and nothing overflows
    w = np.exp((sims[order] - sims[order].max()) / tau)
    totals = np.array([w[labels[order] == c].sum() for c in classes])
    return int(classes[np.argmax(totals)])


def weighted_knn(table: EmbeddingTable, query, top_k: int = 200, tau: float = 0.1,
                 exclude: int | None = None) -> int:
    """Label voted by the ``top_k`` most similar rows with weights ``exp(cos / tau)``.

    Ties go to the smallest label. ``exclude`` drops one row (self-match).
    """
    if len(table) == 0:
        raise InvalidArgumentError("empty table")
    sims = table.features @ np.asarray(query, dtype=np.float64)
    labels = table.labels
    if exclude is not None and len(table) > 1:
        keep = np.arange(len(table)) != exclude
        sims, labels = sims[keep], labels[keep]
    return _vote(sims, labels, top_k, tau)


def knn_accuracy(train_table: EmbeddingTable, test_table: EmbeddingTable, top_k: int = 200,
                 tau: float = 0.1, exclude_self: bool | None = None) -> float:
    """Fraction of test rows whose weighted-kNN vote matches their label.

    ``exclude_self`` defaults to True exactly when both tables are the same object.
    """
    if len(train_table) == 0 or len(test_table) == 0:
        raise InvalidArgumentError("empty table")
    if exclude_self is None:
        exclude_self = train_table is test_table
    sims_all = test_table.features @ train_table.features.T
    correct = 0
    for i in range(len(test_table)):
        sims, labels = sims_all[i], train_table.labels
        if exclude_self and len(train_table) > 1:
            keep = np.arange(len(train_table)) != i
            sims, labels = sims[keep], labels[keep]
        correct += _vote(sims, labels, top_k, tau) == test_table.labels[i]
    return correct / len(test_table)


def recall_at(table: EmbeddingTable, ks=(1, 2, 4)) -> dict:
    """Recall@k with each query excluded from its own ranking."""
    m = len(table)
    if m < 2:
        raise InvalidArgumentError("recall needs at least two rows")
    sims = table.features @ table.features.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, : m - 1]
    hit = table.labels[order] == table.labels[:, None]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), m)
    return {int(k): float(np.mean(first < k)) for k in ks}


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignments, labels) -> float:
    """I(A; L) / sqrt(H(A) H(L)), with 0/0 taken as 0."""
    a = np.asarray(assignments).reshape(-1)
    b = np.asarray(labels).reshape(-1)
    if a.size != b.size:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidArgumentError("empty input")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    h_a, h_b = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    mi = h_a + h_b - _entropy(joint.ravel())
    return float(min(max(mi / np.sqrt(h_a * h_b), 0.0), 1.0))


def kmeans_assignments(features, n_clusters: int, seed: int = 0, restarts: int = 20) -> np.ndarray:
    km = KMeans(n_clusters=n_clusters, n_init=restarts, random_state=seed)
    return km.fit_predict(np.asarray(features, dtype=np.float64))


def clustering_nmi(table: EmbeddingTable, seed: int = 0) -> float:
    n_clusters = np.unique(table.labels).size
    return nmi(kmeans_assignments(table.features, n_clusters, seed), table.labels)


def cosine_histogram(table: EmbeddingTable, bins: int = 20):
    """Pair counts over [-1, 1] for same-label and different-label pairs.

    Returns ``(centers, positive_counts, negative_counts)``.
    """
    m = len(table)
    if m < 2:
        raise InvalidArgumentError("need at least two rows")
    iu = np.triu_indices(m, k=1)
    sims = np.clip((table.features @ table.features.T)[iu], -1.0, 1.0)
    same = table.labels[iu[0]] == table.labels[iu[1]]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    pos, _ = np.histogram(sims[same], bins=edges)
    neg, _ = np.histogram(sims[~same], bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, pos, neg


def mean_uncertainty(sigmas) -> float:
    """Mean Euclidean norm of the per-row standard-deviation vectors."""
    s = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    if s.size == 0:
        raise InvalidArgumentError("empty input")
    return float(np.mean(np.linalg.norm(s, axis=1)))
