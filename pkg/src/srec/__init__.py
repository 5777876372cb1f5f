"""Streaming recommender with continuous-time latent dynamics.

Gaussian topic vectors per user and item diffuse over continuous time;
discrete ratings are thresholded noisy inner products. Posteriors are
updated online at event times only; variances are learned offline by
variational EM with per-entity backward smoothing.
"""

from .events import (
    Event, LatentState, ModelParams, RatingScale,
    auto_insert_births, read_event_csv, validate_log, write_event_csv,
)
from .online import FilterState, propagate
from .probit import TruncatedGaussian, default_thresholds, discretize, tg_mean, tg_second_moment
from .em import EMConfig, em_fit, forward_pass, smooth_entity
from .simulate import SimConfig, generate
from .evaluate import (
    EvalProtocol, correlation_decay, load_movielens, prequential_eval, rmse,
)

__version__ = "0.1.0"

__all__ = [
    "Event", "LatentState", "ModelParams", "RatingScale",
    "auto_insert_births", "validate_log", "read_event_csv", "write_event_csv",
    "FilterState", "propagate",
    "TruncatedGaussian", "default_thresholds", "discretize",
    "tg_mean", "tg_second_moment",
    "EMConfig", "em_fit", "forward_pass", "smooth_entity",
    "SimConfig", "generate",
    "EvalProtocol", "correlation_decay", "load_movielens",
    "prequential_eval", "rmse",
]
