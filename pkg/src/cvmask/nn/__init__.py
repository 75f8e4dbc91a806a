from .checkpoint import load_arrays, save_arrays
from .gradcheck import grad_check
from .layers import (ConfigError, drop_path, dropout, feed_forward, linear, multi_head_attention,
                     sinusoidal_embed)
from .optim import OptimizerState, adamw_step, clip_grad_norm, global_norm
from .tensor import (GraphError, NonFiniteError, Tensor, backward, bce_with_logits, const, gather, gelu,
                     grad, layer_norm, matmul, mean, mse, parameter, reshape, softmax, sum_all)

__all__ = [
    "ConfigError", "GraphError", "NonFiniteError", "OptimizerState", "Tensor", "adamw_step", "backward",
    "bce_with_logits", "clip_grad_norm", "const", "drop_path", "dropout", "feed_forward", "gather", "gelu",
    "global_norm", "grad", "grad_check", "layer_norm", "linear", "load_arrays", "matmul", "mean", "mse",
    "multi_head_attention", "parameter", "reshape", "save_arrays", "sinusoidal_embed", "softmax", "sum_all",
]
