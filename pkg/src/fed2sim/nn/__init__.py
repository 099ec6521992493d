"""Minimal float64 neural-network engine with grouped layers."""
from .layers import LayerParams, ShapeError
from .model import (ActivationCache, GradientSet, Model, StaleCacheError, accuracy, backward,
                    backward_logits, forward, loss, predict, sgd_step)

__all__ = [
    "ActivationCache", "GradientSet", "LayerParams", "Model", "ShapeError", "StaleCacheError",
    "accuracy", "backward", "backward_logits", "forward", "loss", "predict", "sgd_step",
]
