"""Set-to-set softmax, distribution consistency and histogram-AP ranking losses.

All losses return ``(value, grads)`` where ``grads`` is a dict of arrays shaped
like the inputs they differentiate. Candidate tensors are ``(n, k, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .distributions import CandidateSet, GaussianEmbedding, symmetric_grads, symmetric_terms
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class BatchCandidates:
    z: np.ndarray
    z_aug: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        z_aug = np.asarray(self.z_aug, dtype=np.float64)
        if z.ndim != 3 or z.shape != z_aug.shape or z.shape[0] < 1 or z.shape[1] < 1:
            raise InvalidArgumentError(
                f"candidate tensors must share a shape (n, k, D), got {z.shape} and {z_aug.shape}"
            )
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_aug", z_aug)

    @classmethod
    def from_sets(cls, sets: Sequence[CandidateSet], aug_sets: Sequence[CandidateSet]):
        if len(sets) != len(aug_sets):
            raise InvalidArgumentError("sets and aug_sets must have equal length")
        for i, (a, b) in enumerate(zip(sets, aug_sets)):
            if a.source_index != i or b.source_index != i:
                raise InvalidArgumentError(f"set {i} carries source_index {a.source_index}/{b.source_index}")
        try:
            return cls(np.stack([s.candidates for s in sets]), np.stack([s.candidates for s in aug_sets]))
        except ValueError as exc:
            raise InvalidArgumentError("all candidate sets must share k and D") from exc

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def k(self) -> int:
        return self.z.shape[1]

    @property
    def dim(self) -> int:
        return self.z.shape[2]

    def sets(self):
        return [CandidateSet(c, i) for i, c in enumerate(self.z)]

    def aug_sets(self):
        return [CandidateSet(c, i) for i, c in enumerate(self.z_aug)]


@dataclass(frozen=True)
class HistogramConfig:
    bins: int = 20

    def __post_init__(self):
        if int(self.bins) != self.bins or self.bins < 2:
            raise InvalidArgumentError(f"histogram needs at least 2 bins, got {self.bins}")

    @property
    def centers(self) -> np.ndarray:
        # bin 0 holds similarity 1, bin B holds similarity -1
        return 1.0 - 2.0 * np.arange(self.bins + 1) / self.bins


@dataclass
class LossReport:
    l_s: float
    l_n: float
    l_r: float
    total: float
    grads: dict = field(default_factory=dict)


def set_distance(a: CandidateSet, b: CandidateSet) -> float:
    """Mean pairwise inner product between two candidate sets."""
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.mean(a.candidates @ b.candidates.T))


def set_distance_grad(a: CandidateSet, b: CandidateSet):
    """``(d/d a_rows, d/d b_rows)`` of :func:`set_distance`."""
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    scale = 1.0 / (a.k * b.k)
    ga = np.broadcast_to(scale * b.candidates.sum(axis=0), a.candidates.shape).copy()
    gb = np.broadcast_to(scale * a.candidates.sum(axis=0), b.candidates.shape).copy()
    return ga, gb


def _check_tau(tau):
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")


def _distance_matrix(batch: BatchCandidates) -> np.ndarray:
    # entry [m, i] = d(Z_m, Z'_i); the set distance factorizes through set means
    return batch.z.mean(axis=1) @ batch.z_aug.mean(axis=1).T


def softmax_probability(batch: BatchCandidates, i: int, tau: float) -> float:
    _check_tau(tau)
    if not 0 <= i < batch.n:
        raise InvalidArgumentError(f"instance index {i} out of range for n={batch.n}")
    logits = _distance_matrix(batch)[:, i] / tau
    return float(np.exp(logits[i] - logsumexp(logits)))


def loss_softmax(batch: BatchCandidates, tau: float):
    """Negative log-likelihood summed over instances, with gradients on every row."""
    _check_tau(tau)
    n, k = batch.n, batch.k
    mean_z = batch.z.mean(axis=1)
    mean_aug = batch.z_aug.mean(axis=1)
    logits = (mean_z @ mean_aug.T) / tau
    lse = logsumexp(logits, axis=0)
    value = float(np.sum(lse - np.diag(logits)))
    probs = np.exp(logits - lse[None, :])
    g_logits = (probs - np.eye(n)) / tau
    g_mean_z = g_logits @ mean_aug
    g_mean_aug = g_logits.T @ mean_z
    grads = {
        "z": np.repeat(g_mean_z[:, None, :] / k, k, axis=1),
        "z_aug": np.repeat(g_mean_aug[:, None, :] / k, k, axis=1),
    }
    return value, grads


def _stack(gaussians):
    if isinstance(gaussians, tuple) and len(gaussians) == 2 and isinstance(gaussians[0], np.ndarray):
        return np.asarray(gaussians[0], dtype=np.float64), np.asarray(gaussians[1], dtype=np.float64)
    gs = list(gaussians)
    if not gs or not all(isinstance(g, GaussianEmbedding) for g in gs):
        raise InvalidArgumentError("expected a non-empty sequence of GaussianEmbedding")
    return np.stack([g.mu for g in gs]), np.stack([g.log_var for g in gs])


def loss_consistency(gaussians, aug_gaussians):
    """Sum of symmetric KL divergences between paired Gaussians.

    Accepts sequences of :class:`GaussianEmbedding` or ``(mu, log_var)``
    array pairs of shape ``(n, D)``.
    """
    mu, lv = _stack(gaussians)
    mu_a, lv_a = _stack(aug_gaussians)
    if mu.shape != mu_a.shape:
        raise InvalidArgumentError(f"shape mismatch: {mu.shape} vs {mu_a.shape}")
    value = float(max(np.sum(symmetric_terms(mu, lv, mu_a, lv_a)), 0.0))
    d_mu, d_lv, d_mu_a, d_lv_a = symmetric_grads(mu, lv, mu_a, lv_a)
    return value, {"mu": d_mu, "log_var": d_lv, "mu_aug": d_mu_a, "log_var_aug": d_lv_a}


def _query_row(query, batch: BatchCandidates) -> int:
    i, j = query
    if not (0 <= i < batch.n and 0 <= j < batch.k):
        raise InvalidArgumentError(f"query {query} outside batch of n={batch.n}, k={batch.k}")
    return i * batch.k + j


def exact_ap(query, batch: BatchCandidates) -> float:
    """Average precision of candidate ``query = (i, j)`` against all rows of Z.

    The query itself sits in the ranked list with similarity 1; ties are
    broken by ascending flat row index.
    """
    q = _query_row(query, batch)
    flat = batch.z.reshape(-1, batch.dim)
    sims = flat @ flat[q]
    sims[q] = 1.0
    order = np.lexsort((np.arange(sims.size), -sims))
    positive = (order // batch.k) == query[0]
    hits = np.cumsum(positive)
    ranks = np.arange(1, sims.size + 1)
    return float(np.sum(positive * hits / ranks) / batch.k)


def _soft_bins(sims, bins):
    """Triangular-kernel assignment of similarities to bins.

    Each similarity splits its unit mass between bin ``lo`` and ``lo + 1``
    with weights ``w_lo`` and ``w_hi``. Indices may fall outside ``[0, B]``;
    callers drop those.
    """
    pos = (1.0 - sims) * (bins / 2.0)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    return lo, 1.0 - frac, frac


def _ranking_core(flat, owner, k, bins, want_grad=True):
    """Histogram AP for every row of ``flat`` as a query.

    Returns ``(ap, g_sims)`` where ``g_sims[q, K]`` is dAP_q/d sim[q, K].
    """
    n_rows = flat.shape[0]
    nb = bins + 1
    sims = flat @ flat.T
    np.fill_diagonal(sims, 1.0)
    positive = owner[:, None] == owner[None, :]
    lo, w_lo, w_hi = _soft_bins(sims, bins)
    hi = lo + 1
    ok_lo = (lo >= 0) & (lo <= bins)
    ok_hi = (hi >= 0) & (hi <= bins)
    rows = np.broadcast_to(np.arange(n_rows)[:, None] * nb, sims.shape)

    def histogram(mask):
        idx = np.concatenate([(rows + lo)[ok_lo & mask], (rows + hi)[ok_hi & mask]])
        wts = np.concatenate([w_lo[ok_lo & mask], w_hi[ok_hi & mask]])
        return np.bincount(idx, weights=wts, minlength=n_rows * nb).reshape(n_rows, nb)

    h_pos = histogram(positive)
    h_all = histogram(np.ones_like(positive))
    c_pos = np.cumsum(h_pos, axis=1)
    c_all = np.cumsum(h_all, axis=1)
    nonzero = c_all > 0
    inv = np.where(nonzero, 1.0 / np.where(nonzero, c_all, 1.0), 0.0)
    ap = np.sum(h_pos * c_pos * inv, axis=1) / k
    if not want_grad:
        return ap, None

    def rev_cumsum(a):
        return np.cumsum(a[:, ::-1], axis=1)[:, ::-1]

    g_hpos = (c_pos * inv + rev_cumsum(h_pos * inv)) / k
    g_hall = -rev_cumsum(h_pos * c_pos * inv * inv) / k
    half = bins / 2.0
    lo_c = np.clip(lo, 0, bins)
    hi_c = np.clip(hi, 0, bins)
    r = np.arange(n_rows)[:, None]
    g_lo = np.where(ok_lo, positive * g_hpos[r, lo_c] + g_hall[r, lo_c], 0.0)
    g_hi = np.where(ok_hi, positive * g_hpos[r, hi_c] + g_hall[r, hi_c], 0.0)
    # d w_lo / d sim = +B/2, d w_hi / d sim = -B/2; zero subgradient on a bin center
    g_sims = np.where(w_hi == 0.0, 0.0, half * (g_lo - g_hi))
    np.fill_diagonal(g_sims, 0.0)
    return ap, g_sims


def _flat(batch):
    owner = np.repeat(np.arange(batch.n), batch.k)
    return batch.z.reshape(-1, batch.dim), owner


def histogram_ap(query, batch: BatchCandidates, cfg: HistogramConfig):
    """Differentiable AP for one query, with gradients on the rows of Z."""
    if not isinstance(cfg, HistogramConfig):
        raise InvalidArgumentError("cfg must be a HistogramConfig")
    q = _query_row(query, batch)
    flat, owner = _flat(batch)
    ap, g_sims = _ranking_core(flat, owner, batch.k, cfg.bins)
    g_row = g_sims[q]
    grad = g_row[:, None] * flat[q][None, :]
    grad[q] += g_row @ flat
    return float(ap[q]), {"z": grad.reshape(batch.z.shape), "z_aug": np.zeros_like(batch.z_aug)}


def loss_ranking(batch: BatchCandidates, cfg: HistogramConfig):
    """One minus the histogram mAP over every candidate of every instance."""
    if not isinstance(cfg, HistogramConfig):
        raise InvalidArgumentError("cfg must be a HistogramConfig")
    flat, owner = _flat(batch)
    ap, g_sims = _ranking_core(flat, owner, batch.k, cfg.bins)
    value = float(1.0 - ap.mean())
    g = -g_sims / flat.shape[0]
    grad = (g + g.T) @ flat
    return value, {"z": grad.reshape(batch.z.shape), "z_aug": np.zeros_like(batch.z_aug)}


def loss_ranking_value(batch: BatchCandidates, cfg: HistogramConfig) -> float:
    """Value of :func:`loss_ranking` without the backward pass."""
    flat, owner = _flat(batch)
    ap, _ = _ranking_core(flat, owner, batch.k, cfg.bins, want_grad=False)
    return float(1.0 - ap.mean())


def total_loss(batch: BatchCandidates, gaussians, aug_gaussians, tau: float,
               lambda_n: float, lambda_r: float, cfg: HistogramConfig) -> LossReport:
    if lambda_n < 0 or lambda_r < 0:
        raise InvalidArgumentError("loss weights must be non-negative")
    l_s, g_s = loss_softmax(batch, tau)
    l_n, g_n = loss_consistency(gaussians, aug_gaussians)
    l_r, g_r = loss_ranking(batch, cfg)
    grads = {
        "z": g_s["z"] + (lambda_r * g_r["z"] if lambda_r else 0.0),
        "z_aug": g_s["z_aug"] + (lambda_r * g_r["z_aug"] if lambda_r else 0.0),
    }
    for key, g in g_n.items():
        grads[key] = lambda_n * g if lambda_n else np.zeros_like(g)
    total = l_s + lambda_n * l_n + lambda_r * l_r
    return LossReport(l_s, l_n, l_r, total, grads)
