"""RWKV linear-attention kernels, a byte-level language model, and scaling checks."""

__version__ = "0.1.0"

from .model import InferenceState, Model, ModelConfig, forward_parallel, forward_step, fresh_state, init_model
from .wkv import WkvState, wkv_bidirectional, wkv_parallel, wkv_sequential, wkv_sequential_step

__all__ = [
    "InferenceState",
    "Model",
    "ModelConfig",
    "WkvState",
    "forward_parallel",
    "forward_step",
    "fresh_state",
    "init_model",
    "wkv_bidirectional",
    "wkv_parallel",
    "wkv_sequential",
    "wkv_sequential_step",
]
