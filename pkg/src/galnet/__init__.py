"""Multi-task attribute recognition with a graph attention layer over
per-attribute branch features, on a small numpy autodiff engine."""

from galnet.autodiff import Tensor, backward, detach, grad_check
from galnet.data import Dataset, SyntheticConfig, generate_synthetic
from galnet.model import AttributeModel, ModelConfig, ParamRegistry, build_model
from galnet.training import TrainConfig, partitioned_step, train

__all__ = [
    "AttributeModel",
    "Dataset",
    "ModelConfig",
    "ParamRegistry",
    "SyntheticConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "detach",
    "generate_synthetic",
    "grad_check",
    "partitioned_step",
    "train",
]
