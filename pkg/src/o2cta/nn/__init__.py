"""Minimal float64 autodiff core with the layers the classifier needs."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import Conv3d, EncoderLayer, LayerNorm, Linear, Module, MultiHeadAttention
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Graph, Tensor, backward, relu

__all__ = [
    "AdamState",
    "Conv3d",
    "EncoderLayer",
    "Graph",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "adam_step",
    "backward",
    "cosine_lr",
    "functional",
    "load_checkpoint",
    "relu",
    "save_checkpoint",
]
