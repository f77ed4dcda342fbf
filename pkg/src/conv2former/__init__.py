"""Convolutional modulation networks on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .analysis import complexity_compare, count_macs, count_params, probe_layer, receptive_field_probe
from .architecture import ModelConfig, build_model, model_forward
from .checkpoint import checkpoint_load, checkpoint_save
from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    Conv2FormerError,
    DimensionError,
    FormatError,
    NumericError,
)
from .gradcheck import gradcheck
from .rng import Rng
from .spatial import FusionStrategy, conv_mod_forward, self_attention_forward
from .tensor import Tape, Tensor, backward, no_grad
from .training import SynthDataset, TrainConfig, ablate_fusion, train_loop

__all__ = [
    "ConfigError", "ContractError", "Conv2FormerError", "DimensionError", "FormatError", "FusionStrategy",
    "ModelConfig", "NumericError", "Rng", "RunConfig", "SynthDataset", "Tape", "Tensor", "TrainConfig",
    "ablate_fusion", "backward", "build_model", "checkpoint_load", "checkpoint_save", "complexity_compare",
    "conv_mod_forward", "count_macs", "count_params", "gradcheck", "model_forward", "no_grad",
    "probe_layer", "receptive_field_probe", "self_attention_forward", "train_loop",
]
