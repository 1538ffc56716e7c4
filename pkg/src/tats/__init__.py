"""Trajectory-aware adaptive token sampling for masked video modeling.

Desk-scale pipeline: a from-scratch autodiff engine, a space-time tokenizer,
trajectory attention, an actor/value token sampler, a small masked
autoencoder, and the alternating PPO training loop, plus a synthetic-video
harness for verification.
"""

from .config import TrainConfig, load_config, parse_config
from .mae import MAEConfig
from .sampler import MaskSpec, PolicyOutput, SamplerParams, ValueOutput
from .tensor import DiffTensor, ParamStore, backward, finite_difference_check, no_grad
from .tokenizer import ClipTensor, TokenGrid, TokenizerConfig
from .trainer import Episode, MemoryBuffer, PPOConfig, TrainState, load_checkpoint, save_checkpoint, train
from .trajectory import SpaceTimeLayout, TAParams

__version__ = "0.1.0"

__all__ = [
    "ClipTensor",
    "DiffTensor",
    "Episode",
    "MAEConfig",
    "MaskSpec",
    "MemoryBuffer",
    "ParamStore",
    "PPOConfig",
    "PolicyOutput",
    "SamplerParams",
    "SpaceTimeLayout",
    "TAParams",
    "TokenGrid",
    "TokenizerConfig",
    "TrainConfig",
    "TrainState",
    "ValueOutput",
    "backward",
    "finite_difference_check",
    "load_checkpoint",
    "load_config",
    "no_grad",
    "parse_config",
    "save_checkpoint",
    "train",
    "__version__",
]
