"""Small float64 autodiff core: tensors, layers, AdamW, gradient checks, checkpoints."""

from . import tensor
from .checkpoint import content_id, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import (BatchNormState, activation, batchnorm1d, euclidean, l2_normalize, layer_norm,
                     linear)
from .optim import AdamW, AdamWState, OptimizerConfig, adamw_step
from .tensor import (Tape, Tensor, as_tensor, concat, conv1d, maxpool1d, softmax, stack)

__all__ = [
    "AdamW", "AdamWState", "BatchNormState", "GradCheckReport", "OptimizerConfig", "Tape", "Tensor",
    "activation", "adamw_step", "as_tensor", "batchnorm1d", "concat", "content_id", "conv1d",
    "euclidean", "grad_check", "l2_normalize", "layer_norm", "linear", "load_checkpoint",
    "maxpool1d", "save_checkpoint", "softmax", "stack", "tensor",
]
