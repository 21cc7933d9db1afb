from .tensor import Parameter, Tensor, concat, stopgrad
from .nn import (
    Model,
    TransformerBlocks,
    area_matrix,
    attention_mask_bias,
    bilinear_matrix,
    conv2d,
    cross_entropy,
    embedding_lookup,
    gelu,
    init_normal,
    layer_norm,
    linear,
    multi_head_attention,
    resample2d,
    softmax,
)
from .optim import OptimizerState, adam_step
from .gradcheck import gradient_check
from .checkpoint import read_checkpoint, write_checkpoint

__all__ = [
    "Model", "OptimizerState", "Parameter", "Tensor", "TransformerBlocks",
    "adam_step", "area_matrix", "attention_mask_bias", "bilinear_matrix",
    "concat", "conv2d", "cross_entropy", "embedding_lookup", "gelu",
    "gradient_check", "init_normal", "layer_norm", "linear",
    "multi_head_attention", "read_checkpoint", "resample2d", "softmax",
    "stopgrad", "write_checkpoint",
]
