"""Diagonal Gaussian embeddings, reparameterized candidate sampling and KL.

Variances are stored as log-variances clamped to ``[LOGVAR_MIN, LOGVAR_MAX]``.
Every sampler takes its standard-normal noise from the caller, so all
functions here are deterministic given their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidEmbeddingError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


@dataclass(frozen=True)
class GaussianEmbedding:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        log_var = np.array(self.log_var, dtype=np.float64).reshape(-1)
        if mu.size < 1 or mu.shape != log_var.shape:
            raise InvalidArgumentError(
                f"mu and log_var must have equal length >= 1, got {mu.shape} and {log_var.shape}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise InvalidEmbeddingError("mu and log_var must be finite")
        log_var = np.clip(log_var, LOGVAR_MIN, LOGVAR_MAX)
        mu.flags.writeable = False
        log_var.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class MixtureEmbedding:
    components: tuple
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InvalidArgumentError("mixture needs at least one component")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise InvalidArgumentError(f"mixture components disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", np.full(len(comps), 1.0 / len(comps)))

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass(frozen=True)
class CandidateSet:
    """k unit-norm candidates drawn from one instance's distribution.

    ``raw`` holds the pre-normalization samples and ``norms`` their lengths;
    together with ``noise`` and ``std`` they are what :meth:`backward` needs.
    """

    candidates: np.ndarray
    source_index: int = 0
    raw: np.ndarray | None = None
    norms: np.ndarray | None = None
    noise: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.candidates, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise InvalidArgumentError(f"candidates must be a k x D matrix with k >= 1, got {z.shape}")
        object.__setattr__(self, "candidates", z)

    @property
    def k(self) -> int:
        return self.candidates.shape[0]

    @property
    def dim(self) -> int:
        return self.candidates.shape[1]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pull a gradient on the candidates back to ``(d mu, d log_var)``."""
        if self.raw is None:
            raise InvalidArgumentError("candidate set was not produced by a sampler")
        gmu, glv = sample_backward(
            np.asarray(grad)[None], self.candidates[None], self.norms[None],
            self.noise[None], self.std[None],
        )
        return gmu[0], glv[0]


def sample_normalized(mu, log_var, noise):
    """Batched reparameterized sampling.

    ``mu`` and ``log_var`` are ``(n, D)``, ``noise`` is ``(n, k, D)``. Returns
    ``(z, norms, std)`` with ``z = normalize(mu + std * noise)`` row-wise.
    """
    std = np.exp(0.5 * log_var)
    raw = mu[:, None, :] + std[:, None, :] * noise
    norms = np.linalg.norm(raw, axis=-1)
    if np.any(norms == 0.0):
        raise InvalidEmbeddingError("sampled candidate has zero norm")
    z = raw / norms[..., None]
    return z, norms, std


def sample_backward(grad_z, z, norms, noise, std):
    """Backward of :func:`sample_normalized` w.r.t. ``mu`` and ``log_var``.

    The normalization Jacobian is ``(I - z z^T) / |raw|``; the sampling step
    contributes ``d raw / d log_var = 0.5 * std * noise``.
    """
    radial = np.sum(grad_z * z, axis=-1, keepdims=True)
    grad_raw = (grad_z - radial * z) / norms[..., None]
    grad_mu = grad_raw.sum(axis=1)
    grad_log_var = 0.5 * std * np.sum(grad_raw * noise, axis=1)
    return grad_mu, grad_log_var


def _check_noise(noise, k, dim):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (k, dim):
        raise InvalidArgumentError(f"noise must have shape {(k, dim)}, got {noise.shape}")
    return noise


def sample_candidates(g: GaussianEmbedding, k: int, noise, source_index: int = 0) -> CandidateSet:
    if k < 1:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    noise = _check_noise(noise, k, g.dim)
    z, norms, std = sample_normalized(g.mu[None], g.log_var[None], noise[None])
    raw = g.mu + std[0] * noise
    return CandidateSet(z[0], source_index, raw=raw, norms=norms[0], noise=noise, std=std[0])


def sample_mixture(m: MixtureEmbedding, k: int, noise, component_draws, source_index: int = 0) -> CandidateSet:
    """Candidate ``j`` comes from component ``component_draws[j]``.

    The returned set's ``backward`` is unavailable because rows belong to
    different components; use :func:`sample_candidates` per component when
    gradients are needed.
    """
    if not isinstance(m, MixtureEmbedding) or not m.components:
        raise InvalidArgumentError("empty mixture")
    if k < 1:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    noise = _check_noise(noise, k, m.dim)
    draws = np.asarray(component_draws, dtype=int).reshape(-1)
    if draws.size != k or np.any(draws < 0) or np.any(draws >= len(m.components)):
        raise InvalidArgumentError("component_draws must hold k indices into the mixture")
    mu = np.stack([m.components[c].mu for c in draws])
    log_var = np.stack([m.components[c].log_var for c in draws])
    z, norms, _ = sample_normalized(mu, log_var, noise[:, None, :])
    return CandidateSet(z[:, 0, :], source_index)


def draw_components(m: MixtureEmbedding, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(m.components), size=k, p=m.weights)


def _check_pair(g_i, g_j):
    if g_i.dim != g_j.dim:
        raise InvalidArgumentError(f"dimension mismatch: {g_i.dim} vs {g_j.dim}")


def kl_divergence(g_i: GaussianEmbedding, g_j: GaussianEmbedding) -> float:
    """KL(g_i || g_j) for diagonal Gaussians."""
    _check_pair(g_i, g_j)
    diff = g_j.mu - g_i.mu
    inv_var_j = np.exp(-g_j.log_var)
    terms = (g_j.log_var - g_i.log_var - 1.0 + np.exp(g_i.log_var - g_j.log_var)
             + diff * diff * inv_var_j)
    return float(max(0.5 * np.sum(terms), 0.0))


def kl_divergence_grad(g_i: GaussianEmbedding, g_j: GaussianEmbedding):
    """Partials of KL(g_i || g_j): ``(d mu_i, d log_var_i, d mu_j, d log_var_j)``."""
    _check_pair(g_i, g_j)
    diff = g_j.mu - g_i.mu
    inv_var_j = np.exp(-g_j.log_var)
    ratio = np.exp(g_i.log_var - g_j.log_var)
    d_mu_j = diff * inv_var_j
    return (-d_mu_j, 0.5 * (ratio - 1.0), d_mu_j,
            0.5 * (1.0 - ratio - diff * diff * inv_var_j))


def symmetric_terms(mu_a, lv_a, mu_b, lv_b):
    """Per-coordinate KL(a||b) + KL(b||a), written so swapping a and b is bit-exact."""
    diff = mu_a - mu_b
    d2 = diff * diff
    return 0.5 * ((np.exp(lv_a - lv_b) + np.exp(lv_b - lv_a)) - 2.0
                  + d2 * (np.exp(-lv_a) + np.exp(-lv_b)))


def symmetric_grads(mu_a, lv_a, mu_b, lv_b):
    """Gradients of ``symmetric_terms`` summed: ``(d mu_a, d lv_a, d mu_b, d lv_b)``."""
    diff = mu_a - mu_b
    d2 = diff * diff
    inv_a, inv_b = np.exp(-lv_a), np.exp(-lv_b)
    e_ab, e_ba = np.exp(lv_a - lv_b), np.exp(lv_b - lv_a)
    d_mu_a = diff * (inv_a + inv_b)
    d_lv_a = 0.5 * (e_ab - e_ba - d2 * inv_a)
    d_lv_b = 0.5 * (e_ba - e_ab - d2 * inv_b)
    return d_mu_a, d_lv_a, -d_mu_a, d_lv_b


def symmetric_divergence(g: GaussianEmbedding, g_aug: GaussianEmbedding) -> float:
    _check_pair(g, g_aug)
    terms = symmetric_terms(g.mu, g.log_var, g_aug.mu, g_aug.log_var)
    return float(max(np.sum(terms), 0.0))
