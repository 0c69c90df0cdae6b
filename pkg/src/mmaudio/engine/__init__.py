"""Minimal differentiable tensor engine (NHWC, NumPy)."""

from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    flatten_backward,
    flatten_forward,
    l2_penalty,
    maxpool2d_backward,
    maxpool2d_forward,
    multilabel_bce,
    relu_backward,
    relu_forward,
    sigmoid,
    sigmoid_backward,
    sigmoid_forward,
    softmax_cross_entropy,
)
from .optim import AdamState, adam_step, lr_at_epoch

__all__ = [
    "AdamState",
    "adam_step",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv2d_backward",
    "conv2d_forward",
    "dense_backward",
    "dense_forward",
    "dropout_backward",
    "dropout_forward",
    "flatten_backward",
    "flatten_forward",
    "l2_penalty",
    "load_checkpoint",
    "lr_at_epoch",
    "maxpool2d_backward",
    "maxpool2d_forward",
    "multilabel_bce",
    "relu_backward",
    "relu_forward",
    "save_checkpoint",
    "sigmoid",
    "sigmoid_backward",
    "sigmoid_forward",
    "softmax_cross_entropy",
]
