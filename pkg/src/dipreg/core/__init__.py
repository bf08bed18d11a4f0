from .nn import (DEFAULT_SLOPE, concat_channels, conv2d, instance_norm, leaky_relu,
                 slice_channels, upsample_bilinear2x)
from .optim import AdamState, adam_step
from .random import Rng, sample_normal
from .tensor import Tensor, as_tensor, backward, make_node, mean, stack, tabs, tsum

__all__ = [
    "DEFAULT_SLOPE", "AdamState", "Rng", "Tensor", "adam_step", "as_tensor", "backward",
    "concat_channels", "conv2d", "instance_norm", "leaky_relu", "make_node", "mean",
    "sample_normal", "slice_channels", "stack", "tabs", "tsum", "upsample_bilinear2x",
]
