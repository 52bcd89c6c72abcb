"""Uncertainty-aware unsupervised embedding learning with Gaussian embeddings and candidate sets."""

from .distributions import CandidateSet, GaussianEmbedding, MixtureEmbedding, sample_candidates, sample_mixture
from .errors import DivergedTrainingError, EvaluationError, InvalidArgumentError, InvalidEmbeddingError
from .losses import BatchCandidates, HistogramConfig, LossReport, total_loss
from .schedule import SFDSchedule, candidates_for_epoch
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "BatchCandidates", "CandidateSet", "DivergedTrainingError", "EvaluationError", "GaussianEmbedding",
    "HistogramConfig", "InvalidArgumentError", "InvalidEmbeddingError", "LossReport", "MixtureEmbedding",
    "SFDSchedule", "TrainConfig", "candidates_for_epoch", "fit", "sample_candidates", "sample_mixture",
    "total_loss",
]
