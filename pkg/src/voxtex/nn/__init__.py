from .tensor import Tensor, no_grad, parameter, set_debug_checks
from .layers import (
    add, affine, binary_cross_entropy, clip, concat, conv2d, conv3d, exp,
    fully_connected, gaussian_kl, global_avg_pool, he_normal, l2_loss,
    layer_norm, leaky_relu, log, max_pool2d, maximum, mul, reduce_mean,
    reduce_sum, relu, reshape, scale, sigmoid, sub, tanh, transposed_conv3d,
    upsample2d,
)
from .optim import Adam
from .serialize import ModelParams, config_hash, load_params, save_params

__all__ = [
    "Tensor", "no_grad", "parameter", "set_debug_checks",
    "add", "affine", "binary_cross_entropy", "clip", "concat", "conv2d",
    "conv3d", "exp", "fully_connected", "gaussian_kl", "global_avg_pool",
    "he_normal", "l2_loss", "layer_norm", "leaky_relu", "log", "max_pool2d",
    "maximum", "mul", "reduce_mean", "reduce_sum", "relu", "reshape", "scale",
    "sigmoid", "sub", "tanh", "transposed_conv3d", "upsample2d",
    "Adam", "ModelParams", "config_hash", "load_params", "save_params",
]
