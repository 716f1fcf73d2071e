"""Gradient machinery and training for the amortized and stochastic methods."""
from .config import TrainConfig
from .core import (Adam, AdamState, ConstraintMap, FlatParams, Segment, adam_step, grad_check,
                   gumbel_softmax_sample, temperature_at)
from .losses import (build_params, encoder_params, loss_acp, loss_avi, loss_svi, model_params,
                     sample_noise)

__all__ = [
    "Adam", "AdamState", "ConstraintMap", "FlatParams", "Segment", "TrainConfig", "adam_step",
    "build_params", "encoder_params", "grad_check", "gumbel_softmax_sample", "loss_acp",
    "loss_avi", "loss_svi", "model_params", "sample_noise", "temperature_at",
]
from .train import TrainResult, flat_provider, log_to_csv, posterior_provider, train  # noqa: E402

__all__ += ["TrainResult", "flat_provider", "log_to_csv", "posterior_provider", "train"]
