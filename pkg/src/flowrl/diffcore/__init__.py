"""Minimal reverse-mode differentiation engine: tensors, MLPs, optimizers."""

from flowrl.diffcore.tensor import Tensor, concat
from flowrl.diffcore.nn import (
    MlpSpec,
    MlpTape,
    ParamSet,
    backward,
    clone_params,
    init_mlp,
    input_derivative,
    mlp_forward,
    mlp_value,
    mlp_value_and_input_jvp,
    param_count,
)
from flowrl.diffcore.optim import AdamState, adam_step, ema_update
from flowrl.diffcore.serialize import load_params, params_from_obj, params_to_obj, save_params

__all__ = [
    "Tensor", "concat",
    "MlpSpec", "MlpTape", "ParamSet",
    "backward", "clone_params", "init_mlp", "input_derivative",
    "mlp_forward", "mlp_value", "mlp_value_and_input_jvp", "param_count",
    "AdamState", "adam_step", "ema_update",
    "load_params", "params_from_obj", "params_to_obj", "save_params",
]
