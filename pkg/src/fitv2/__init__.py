"""Flexible-resolution diffusion transformer on a numpy autodiff engine."""

from .blocks import FiTv2, ModelConfig, TokenBatch, forward
from .flow import FlowConfig, TimestepSampler, TrainConfig, ode_sample, train_loop

__version__ = "0.1.0"

__all__ = [
    "FiTv2",
    "FlowConfig",
    "ModelConfig",
    "TimestepSampler",
    "TokenBatch",
    "TrainConfig",
    "forward",
    "ode_sample",
    "train_loop",
]
