"""Selective SSM inference engine, cost profiler and activity-guided state pruning."""

from .core import (
    DecodeCache,
    InputMode,
    LayerParams,
    LayerState,
    Model,
    ModelConfig,
    Variant,
    block_forward,
    init_model,
    model_forward,
)

__version__ = "0.1.0"

__all__ = [
    "DecodeCache",
    "InputMode",
    "LayerParams",
    "LayerState",
    "Model",
    "ModelConfig",
    "Variant",
    "block_forward",
    "init_model",
    "model_forward",
]
