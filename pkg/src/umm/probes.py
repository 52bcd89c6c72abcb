"""Vanishing-gradient probe, PAC-Bayes bound calculator and an outlier dataset generator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .distributions import sample_backward, sample_normalized
from .errors import InvalidArgumentError

OUTLIER_MODES = ("near-duplicate-cross-class", "intra-class-divergent")
NEAR_DUPLICATE_RADIUS = 0.05
DIVERGENT_SHIFT = 2.0


@dataclass(frozen=True)
class OutlierDatasetConfig:
    classes: int = 10
    per_class: int = 100
    input_dim: int = 16
    class_separation: float = 4.0
    outlier_fraction: float = 0.1
    outlier_mode: str = "near-duplicate-cross-class"
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 1 or self.input_dim < 1:
            raise InvalidArgumentError("classes, per_class and input_dim must be positive")
        if not self.class_separation > 0:
            raise InvalidArgumentError("class_separation must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidArgumentError("outlier_fraction must lie in [0, 1]")
        if self.outlier_mode not in OUTLIER_MODES:
            raise InvalidArgumentError(f"outlier_mode must be one of {OUTLIER_MODES}")
        if self.classes > self.input_dim + 1:
            raise InvalidArgumentError(
                f"cannot place {self.classes} equidistant class centers in {self.input_dim} dimensions"
                f" (need classes <= input_dim + 1)"
            )

    @property
    def within_std(self) -> float:
        return 0.5 * self.class_separation / math.sqrt(self.input_dim)


@dataclass(frozen=True)
class OutlierDataset:
    x: np.ndarray
    labels: np.ndarray
    outlier: np.ndarray
    centers: np.ndarray


def simplex_centers(classes: int, dim: int, separation: float) -> np.ndarray:
    """``classes`` points in ``dim`` dimensions, pairwise ``separation`` apart."""
    if classes == 1:
        return np.zeros((1, dim))
    centered = np.eye(classes) - 1.0 / classes
    # orthonormal coordinates of the centered vertices inside their (classes-1)-dim span
    u, s, _ = np.linalg.svd(centered)
    coords = u[:, : classes - 1] * s[: classes - 1]
    out = np.zeros((classes, dim))
    out[:, : classes - 1] = coords
    return out * (separation / math.sqrt(2.0))


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def make_outlier_dataset(cfg: OutlierDatasetConfig) -> OutlierDataset:
    """Gaussian blobs around simplex vertices with a fraction replaced by outliers.

    Near-duplicate outliers come in pairs of different classes placed within
    ``0.05 * separation`` of each other near the midpoint of their centers.
    Divergent outliers are inliers pushed ``2 * separation`` away in a random
    direction.
    """
    rng = np.random.default_rng(cfg.seed)
    centers = simplex_centers(cfg.classes, cfg.input_dim, cfg.class_separation)
    labels = np.repeat(np.arange(cfg.classes), cfg.per_class)
    x = centers[labels] + rng.standard_normal((labels.size, cfg.input_dim)) * cfg.within_std
    outlier = np.zeros(labels.size, dtype=bool)
    n_out = int(round(cfg.outlier_fraction * labels.size))
    if cfg.outlier_mode == "near-duplicate-cross-class" and cfg.classes >= 2:
        n_pairs = n_out // 2
        chosen = rng.permutation(labels.size)
        used = set()
        pairs = []
        for a in chosen:
            if len(pairs) == n_pairs:
                break
            if a in used:
                continue
            partners = [b for b in chosen if b not in used and b != a and labels[b] != labels[a]]
            if not partners:
                continue
            b = partners[0]
            used.update((a, b))
            pairs.append((a, b))
        radius = NEAR_DUPLICATE_RADIUS * cfg.class_separation
        for a, b in pairs:
            mid = 0.5 * (centers[labels[a]] + centers[labels[b]])
            mid = mid + rng.standard_normal(cfg.input_dim) * cfg.within_std
            x[a] = mid + _unit(rng, cfg.input_dim) * (0.5 * radius * rng.random())
            x[b] = mid + _unit(rng, cfg.input_dim) * (0.5 * radius * rng.random())
            outlier[[a, b]] = True
    elif cfg.outlier_mode == "intra-class-divergent":
        for a in rng.permutation(labels.size)[:n_out]:
            x[a] = x[a] + _unit(rng, cfg.input_dim) * (DIVERGENT_SHIFT * cfg.class_separation)
            outlier[a] = True
    return OutlierDataset(x, labels, outlier, centers)


def pac_bayes_bound(kl_qp: float, n: int, delta: float) -> float:
    """Deviation bound sqrt((KL + ln(2 sqrt(n) / delta)) / (2n))."""
    return math.sqrt(pac_bayes_bound_squared(kl_qp, n, delta))


def pac_bayes_bound_squared(kl_qp: float, n: int, delta: float) -> float:
    if not 0.0 < delta <= 1.0:
        raise InvalidArgumentError(f"delta must lie in (0, 1], got {delta}")
    if n < 1 or int(n) != n:
        raise InvalidArgumentError(f"n must be a positive integer, got {n}")
    if kl_qp < 0:
        raise InvalidArgumentError(f"KL must be non-negative, got {kl_qp}")
    return (kl_qp + math.log(2.0 * math.sqrt(n) / delta)) / (2.0 * n)


@dataclass(frozen=True)
class VanishingReport:
    p_duplicate: float
    grad_norm_point: float
    grad_norm_set: float
    ratio: float
    tau: float
    n: int
    k: int
    p_duplicate_set: float = float("nan")
    grad_norm_reference: float = float("nan")
    reference_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _anchor_term(means, anchor, positive, tau):
    """-log softmax of ``positive`` among all other instances scored against ``anchor``.

    ``means`` are per-instance candidate means (the set distance factorizes
    through them). Returns ``(p, grad wrt means[anchor])``.
    """
    others = np.delete(np.arange(means.shape[0]), anchor)
    logits = means[others] @ means[anchor] / tau
    lse = logsumexp(logits)
    pos = int(np.flatnonzero(others == positive)[0])
    probs = np.exp(logits - lse)
    grad = (probs @ means[others] - means[positive]) / tau
    return float(probs[pos]), grad


def _set_term(mu, std, noise, anchor, positive, tau):
    z, norms, _ = sample_normalized(mu, np.log(std ** 2), noise)
    means = z.mean(axis=1)
    p, g_mean = _anchor_term(means, anchor, positive, tau)
    k = z.shape[1]
    g_z = np.zeros_like(z)
    g_z[anchor] = g_mean[None, :] / k
    g_mu, _ = sample_backward(g_z, z, norms, noise, std)
    return p, g_mu[anchor]


def vanishing_probe(n: int = 64, tau: float = 0.07, k: int = 5, sigma_scale: float = 0.3,
                    seed: int = 0, dim: int = 128) -> VanishingReport:
    """Gradient of the softmax term for a duplicated pair, point vs. sampled sets.

    Instances 0 and 1 share one unit feature; the rest are random unit
    vectors. The point case scores instance 1 against every other instance
    with instance 0 as its positive; gradients are taken w.r.t. instance 1's
    pre-normalization feature. The set case replaces each feature by ``k``
    normalized samples from ``N(feature, sigma_scale^2 I)`` and scores set
    means. The reference is the same term averaged over disjoint pairs of
    non-duplicate instances in the point batch.
    """
    if n < 2 or not tau > 0 or k < 1 or sigma_scale < 0 or dim < 1:
        raise InvalidArgumentError("vanishing_probe needs n >= 2, tau > 0, k >= 1, sigma_scale >= 0")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[1] = v[0]
    anchor, positive = 1, 0

    zero = np.zeros((n, 1, dim))
    p_point, g_point = _set_term(v, np.full((n, dim), 1.0), zero, anchor, positive, tau)

    std = np.full((n, dim), float(sigma_scale))
    noise = rng.standard_normal((n, k, dim))
    p_set, g_set = _set_term(v, std, noise, anchor, positive, tau)

    ref = []
    for a in range(2, n - 1, 2):
        _, g = _set_term(v, np.full((n, dim), 1.0), zero, a, a + 1, tau)
        ref.append(np.linalg.norm(g))
    ref_norm = float(np.mean(ref)) if ref else float("nan")

    g_p, g_s = float(np.linalg.norm(g_point)), float(np.linalg.norm(g_set))
    return VanishingReport(
        p_duplicate=p_point, grad_norm_point=g_p, grad_norm_set=g_s,
        ratio=g_s / max(g_p, 1e-30), tau=tau, n=n, k=k, p_duplicate_set=p_set,
        grad_norm_reference=ref_norm, reference_ratio=g_p / ref_norm if ref else float("nan"),
    )
