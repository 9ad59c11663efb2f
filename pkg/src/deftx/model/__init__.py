"""
Model Module

Toy transformer encoder standing in for a pretrained multilingual model.
"""

from .batch import Batch, IGNORE_INDEX, PAD_ID, CLS_ID, MASK_ID, N_SPECIAL
from .params import (
    ParameterSet,
    GradientSet,
    DeltaSet,
    parameter_layout,
    head_layout,
    init_params,
    init_head,
    head_names,
    layer_of,
)
from .encoder import ForwardResult, forward_loss, backward, loss_and_grad, predict

__all__ = [
    "Batch",
    "IGNORE_INDEX",
    "PAD_ID",
    "CLS_ID",
    "MASK_ID",
    "N_SPECIAL",
    "ParameterSet",
    "GradientSet",
    "DeltaSet",
    "parameter_layout",
    "head_layout",
    "init_params",
    "init_head",
    "head_names",
    "layer_of",
    "ForwardResult",
    "forward_loss",
    "backward",
    "loss_and_grad",
    "predict",
]
