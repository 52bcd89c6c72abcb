"""End-to-end training: augmentation, one optimization step, and the epoch loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .distributions import LOGVAR_MIN, sample_backward, sample_normalized
from .errors import DivergedTrainingError, InvalidArgumentError
from .losses import (BatchCandidates, HistogramConfig, LossReport, loss_consistency, loss_ranking,
                     loss_ranking_value, loss_softmax)
from .model import EncoderModel
from .schedule import SFDSchedule, candidates_for_epoch


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.06
    momentum: float = 0.9
    decay_milestones: tuple = (60, 120, 160)
    decay_factors: tuple = (0.5, 0.1, 0.05)
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "decay_milestones", tuple(int(m) for m in self.decay_milestones))
        object.__setattr__(self, "decay_factors", tuple(float(f) for f in self.decay_factors))
        if len(self.decay_milestones) != len(self.decay_factors):
            raise InvalidArgumentError("decay_milestones and decay_factors must have equal length")
        if list(self.decay_milestones) != sorted(set(self.decay_milestones)):
            raise InvalidArgumentError("decay_milestones must be strictly increasing")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgumentError("invalid optimizer hyperparameters")
        if any(f <= 0 for f in self.decay_factors):
            raise InvalidArgumentError("decay factors must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    noise_std: float = 0.1
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.noise_std < 0 or not 0 <= self.dropout_prob <= 1:
            raise InvalidArgumentError("invalid augmentation parameters")


def _trim_milestones(opt: OptimizerConfig, epochs: int) -> OptimizerConfig:
    """Drop decay milestones (and their factors) that a run of ``epochs`` never reaches."""
    keep = [(m, f) for m, f in zip(opt.decay_milestones, opt.decay_factors) if m <= epochs]
    return dataclasses.replace(opt, decay_milestones=tuple(m for m, _ in keep),
                               decay_factors=tuple(f for _, f in keep))


@dataclass(frozen=True)
class TrainConfig:
    d: int = 32
    hidden: tuple = (256, 128)
    tau: float = 0.1
    lambda_n: float = 1.0
    lambda_r: float = 1.0
    batch_size: int = 64
    epochs: int = 200
    hist_bins: int = 20
    seed: int = 0
    init_log_var: float = 0.0
    # pins every log-variance to this value (deterministic baseline when LOGVAR_MIN)
    fixed_log_var: float | None = None
    # project mu onto the unit sphere before sampling and KL
    normalize_mu: bool = True
    sfd: SFDSchedule = field(default_factory=SFDSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for name in ("d", "batch_size", "hist_bins"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be non-negative")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be positive")
        if self.lambda_n < 0 or self.lambda_r < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if self.optimizer == OptimizerConfig():
            # default decay milestones past a shorter run are simply never reached
            object.__setattr__(self, "optimizer", _trim_milestones(self.optimizer, self.epochs))
        if any(m > self.epochs for m in self.optimizer.decay_milestones):
            raise InvalidArgumentError("decay milestones must lie within [0, epochs]")
        HistogramConfig(self.hist_bins)

    @property
    def histogram(self) -> HistogramConfig:
        return HistogramConfig(self.hist_bins)

    @classmethod
    def baseline(cls, **overrides) -> "TrainConfig":
        """Deterministic point-feature special case: minimal sigma, k=1, L_S only."""
        base = dict(fixed_log_var=LOGVAR_MIN, sfd=SFDSchedule.constant(1), lambda_n=0.0, lambda_r=0.0)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "sfd":
                out["sfd"] = {"milestones": [list(m) for m in value.milestones]}
            elif dataclasses.is_dataclass(value):
                out[f.name] = {k: list(v) if isinstance(v, tuple) else v
                               for k, v in dataclasses.asdict(value).items()}
            elif isinstance(value, tuple):
                out[f.name] = list(value)
            elif value is not None:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build a config from nested mappings, rejecting unknown keys."""
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown config key: {unknown[0]}")
        explicit = "decay_milestones" in dict(data.get("optimizer", {}))
        sections = {"optimizer": OptimizerConfig, "augmentation": AugmentConfig}
        for name, kind in sections.items():
            if name in data:
                sub = dict(data[name])
                allowed = {f.name for f in dataclasses.fields(kind)}
                bad = sorted(set(sub) - allowed)
                if bad:
                    raise InvalidArgumentError(f"unknown config key: {name}.{bad[0]}")
                data[name] = kind(**sub)
        if "sfd" in data:
            sub = dict(data["sfd"])
            bad = sorted(set(sub) - {"milestones"})
            if bad:
                raise InvalidArgumentError(f"unknown config key: sfd.{bad[0]}")
            data["sfd"] = SFDSchedule(tuple(tuple(m) for m in sub.get("milestones", SFDSchedule().milestones)))
        if "epochs" in data and not explicit:
            data["optimizer"] = _trim_milestones(data.get("optimizer", OptimizerConfig()), data["epochs"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidArgumentError(str(exc)) from exc


class NegativeProvider(Protocol):
    """Adapter point for memory-bank or queue-based variants.

    An implementation would return extra negative candidate sets of shape
    ``(m, k, D)`` for a minibatch and accept the batch's fresh candidates to
    update its store. Only the end-to-end variant is implemented here, so no
    provider ships with the package.
    """

    def negatives(self, k: int) -> np.ndarray: ...

    def update(self, indices: np.ndarray, candidates: np.ndarray) -> None: ...


@dataclass
class TrainState:
    model: EncoderModel
    velocity: dict
    epoch: int
    rng: np.random.Generator
    history: list = field(default_factory=list)


def init_state(input_dim: int, cfg: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = EncoderModel(input_dim, cfg.hidden, cfg.d, rng=np.random.default_rng(seeds[0]),
                         init_log_var=cfg.init_log_var)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    return TrainState(model, velocity, 0, np.random.default_rng(seeds[1]))


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Base rate times the factor of the last decay milestone reached."""
    opt = cfg.optimizer
    factor = 1.0
    for milestone, f in zip(opt.decay_milestones, opt.decay_factors):
        if epoch >= milestone:
            factor = f
    return opt.lr * factor


def augment(x, rng: np.random.Generator, noise_std: float = 0.1, dropout_prob: float = 0.1) -> np.ndarray:
    """Additive Gaussian noise followed by independent coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.normal(0.0, 1.0, x.shape) * noise_std
    keep = rng.random(x.shape) >= dropout_prob
    return np.where(keep, out, 0.0)


def _encode_views(model, x, cfg):
    mu, log_var, cache = model.forward(x)
    if cfg.fixed_log_var is not None:
        log_var = np.full_like(log_var, cfg.fixed_log_var)
    mu_norm = None
    if cfg.normalize_mu:
        mu_norm = np.linalg.norm(mu, axis=1, keepdims=True)
        mu = mu / mu_norm
    return mu, log_var, cache, mu_norm


def loss_and_grads(model: EncoderModel, x, x_aug, noise, noise_aug, cfg: TrainConfig):
    """Total loss on a minibatch and its gradient w.r.t. every encoder parameter.

    ``noise`` and ``noise_aug`` are ``(n, k, D)`` standard-normal draws. The
    returned gradient is that of ``(L_S + lambda_n L_N) / n + lambda_r L_R``;
    the report carries the unscaled components.
    """
    n = x.shape[0]
    both = np.concatenate([x, x_aug])
    mu_all, lv_all, cache, mu_norm = _encode_views(model, both, cfg)
    mu, mu_a = mu_all[:n], mu_all[n:]
    lv, lv_a = lv_all[:n], lv_all[n:]
    z, norms, std = sample_normalized(mu, lv, noise)
    z_a, norms_a, std_a = sample_normalized(mu_a, lv_a, noise_aug)
    batch = BatchCandidates(z, z_a)
    l_s, g_s = loss_softmax(batch, cfg.tau)
    l_n, g_n = loss_consistency((mu, lv), (mu_a, lv_a))
    if cfg.lambda_r:
        l_r, g_r = loss_ranking(batch, cfg.histogram)
    else:
        l_r, g_r = loss_ranking_value(batch, cfg.histogram), {"z": 0.0}
    report = LossReport(l_s, l_n, l_r, l_s + cfg.lambda_n * l_n + cfg.lambda_r * l_r)
    # L_R is already a mean over candidates; L_S and L_N are sums over the batch
    g_z = g_s["z"] / n + cfg.lambda_r * g_r["z"]
    g_za = g_s["z_aug"] / n
    gm, glv = sample_backward(g_z, z, norms, noise, std)
    gma, glva = sample_backward(g_za, z_a, norms_a, noise_aug, std_a)
    w = cfg.lambda_n / n
    g_mu = np.concatenate([gm + w * g_n["mu"], gma + w * g_n["mu_aug"]])
    g_lv = np.concatenate([glv + w * g_n["log_var"], glva + w * g_n["log_var_aug"]])
    if cfg.fixed_log_var is not None:
        g_lv = np.zeros_like(g_lv)
    if mu_norm is not None:
        g_mu = (g_mu - np.sum(g_mu * mu_all, axis=1, keepdims=True) * mu_all) / mu_norm
    return report, model.backward(cache, g_mu, g_lv)


def _check_finite(report: LossReport, epoch: int, history):
    comps = {"l_s": report.l_s, "l_n": report.l_n, "l_r": report.l_r, "total": report.total}
    if not all(np.isfinite(v) for v in comps.values()):
        raise DivergedTrainingError(epoch, comps, history)


def train_step(state: TrainState, minibatch, cfg: TrainConfig):
    """One augmented forward/backward pass and momentum update; mutates ``state``."""
    x = np.atleast_2d(np.asarray(minibatch, dtype=np.float64))
    if x.shape[0] < 1:
        raise InvalidArgumentError("minibatch must be non-empty")
    n = x.shape[0]
    aug = cfg.augmentation
    x_aug = augment(x, state.rng, aug.noise_std, aug.dropout_prob)
    k = candidates_for_epoch(cfg.sfd, state.epoch)
    noise = state.rng.standard_normal((n, k, cfg.d))
    noise_aug = state.rng.standard_normal((n, k, cfg.d))
    report, grads = loss_and_grads(state.model, x, x_aug, noise, noise_aug, cfg)
    _check_finite(report, state.epoch, state.history)
    lr = learning_rate(cfg, state.epoch)
    opt = cfg.optimizer
    for name, param in state.model.params.items():
        g = grads[name]
        if opt.weight_decay:
            g = g + opt.weight_decay * param
        v = state.velocity[name]
        v *= opt.momentum
        v += g
        param -= lr * v
    report.grads = grads
    return state, report


def epoch_batches(m: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled, near-equal batches; the permutation is seeded by ``(seed, epoch)``."""
    perm = np.random.default_rng([seed, epoch]).permutation(m)
    n_batches = max(1, -(-m // batch_size))
    return [b for b in np.array_split(perm, n_batches) if b.size]


def embed(model: EncoderModel, x, cfg: TrainConfig | None = None, chunk: int = 1024):
    """``(mu, std)`` for every row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mus, stds = [], []
    for start in range(0, x.shape[0], chunk):
        mu, lv, _ = model.forward(x[start:start + chunk])
        if cfg is not None and cfg.fixed_log_var is not None:
            lv = np.full_like(lv, cfg.fixed_log_var)
        mus.append(mu)
        stds.append(np.exp(0.5 * lv))
    return np.concatenate(mus), np.concatenate(stds)


def fit(x, cfg: TrainConfig, eval_fn: Callable[[EncoderModel], float] | None = None,
        eval_every: int | None = None, state: TrainState | None = None,
        log: Callable[[dict], None] | None = None):
    """Train for ``cfg.epochs`` epochs and return ``(state, history)``.

    Each history record holds the epoch's mean loss components, the mean
    uncertainty norm over ``x`` and, every ``eval_every`` epochs, ``knn_acc``
    from ``eval_fn``. Labels never enter this function.
    """
    from .evaluation import mean_uncertainty

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise InvalidArgumentError("dataset is empty")
    state = init_state(x.shape[1], cfg) if state is None else state
    while state.epoch < cfg.epochs:
        sums = np.zeros(4)
        batches = epoch_batches(x.shape[0], cfg.batch_size, cfg.seed, state.epoch)
        for idx in batches:
            _, report = train_step(state, x[idx], cfg)
            sums += (report.l_s, report.l_n, report.l_r, report.total)
        means = sums / len(batches)
        _, std = embed(state.model, x, cfg)
        record = {"epoch": state.epoch + 1, "l_s": means[0], "l_n": means[1], "l_r": means[2],
                  "total": means[3], "mean_sigma": mean_uncertainty(std), "knn_acc": None}
        if eval_fn is not None and eval_every and (state.epoch + 1) % eval_every == 0:
            record["knn_acc"] = float(eval_fn(state.model))
        state.history.append(record)
        state.epoch += 1
        if log is not None:
            log(record)
    return state, state.history
