"""Feed-forward encoder with a mean head and a log-variance head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import LOGVAR_MAX, LOGVAR_MIN, GaussianEmbedding
from .errors import InvalidArgumentError


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list
    log_var_raw: np.ndarray


class EncoderModel:
    """tanh MLP trunk followed by two affine heads.

    Parameters live in ``self.params``, an ordered dict of float64 arrays keyed
    ``trunk.<i>.weight``, ``trunk.<i>.bias``, ``mu_head.*`` and ``sigma_head.*``.
    Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(self, input_dim: int, hidden=(256, 128), dim: int = 32,
                 rng: np.random.Generator | None = None, init_log_var: float = 0.0,
                 zero_heads: bool = False):
        if input_dim < 1 or dim < 1 or any(h < 1 for h in hidden):
            raise InvalidArgumentError("layer sizes must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.dim = int(dim)
        self.params = {}
        sizes = (self.input_dim,) + self.hidden
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            self.params[f"trunk.{i}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
            self.params[f"trunk.{i}.bias"] = np.zeros(fan_out)
        last = sizes[-1]
        scale = 0.0 if zero_heads else 1.0 / np.sqrt(last)
        self.params["mu_head.weight"] = rng.normal(0.0, 1.0, (last, self.dim)) * scale
        self.params["mu_head.bias"] = np.zeros(self.dim)
        self.params["sigma_head.weight"] = rng.normal(0.0, 1.0, (last, self.dim)) * (0.1 * scale)
        self.params["sigma_head.bias"] = np.full(self.dim, float(init_log_var))

    @property
    def n_layers(self) -> int:
        return len(self.hidden)

    def forward(self, x):
        """Batched forward pass; returns ``(mu, log_var, cache)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise InvalidArgumentError(f"expected input dimension {self.input_dim}, got {x.shape[1]}")
        acts = []
        h = x
        for i in range(self.n_layers):
            h = np.tanh(h @ self.params[f"trunk.{i}.weight"] + self.params[f"trunk.{i}.bias"])
            acts.append(h)
        mu = h @ self.params["mu_head.weight"] + self.params["mu_head.bias"]
        raw = h @ self.params["sigma_head.weight"] + self.params["sigma_head.bias"]
        log_var = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
        return mu, log_var, ForwardCache(x, acts, raw)

    def backward(self, cache: ForwardCache, grad_mu, grad_log_var) -> dict:
        """Parameter gradients given upstream gradients on ``mu`` and ``log_var``."""
        grads = {}
        h = cache.activations[-1]
        inside = (cache.log_var_raw > LOGVAR_MIN) & (cache.log_var_raw < LOGVAR_MAX)
        g_raw = np.where(inside, grad_log_var, 0.0)
        grads["mu_head.weight"] = h.T @ grad_mu
        grads["mu_head.bias"] = grad_mu.sum(axis=0)
        grads["sigma_head.weight"] = h.T @ g_raw
        grads["sigma_head.bias"] = g_raw.sum(axis=0)
        g_h = grad_mu @ self.params["mu_head.weight"].T + g_raw @ self.params["sigma_head.weight"].T
        for i in reversed(range(self.n_layers)):
            act = cache.activations[i]
            g_pre = g_h * (1.0 - act * act)
            below = cache.activations[i - 1] if i > 0 else cache.inputs
            grads[f"trunk.{i}.weight"] = below.T @ g_pre
            grads[f"trunk.{i}.bias"] = g_pre.sum(axis=0)
            if i > 0:
                g_h = g_pre @ self.params[f"trunk.{i}.weight"].T
        return {name: grads[name] for name in self.params}

    def copy(self) -> "EncoderModel":
        clone = object.__new__(EncoderModel)
        clone.input_dim, clone.hidden, clone.dim = self.input_dim, self.hidden, self.dim
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


def encode(model: EncoderModel, x) -> GaussianEmbedding:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidArgumentError("encode takes a single input vector; use EncoderModel.forward for batches")
    mu, log_var, _ = model.forward(x)
    return GaussianEmbedding(mu[0], log_var[0])
