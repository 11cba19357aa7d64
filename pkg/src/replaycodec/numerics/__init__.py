from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, serialize_params, deserialize_params
from .optim import OptimizerState, adam_step, global_grad_norm
from .tensor import ContractError, DimensionError, GROUPS, Parameter, Tensor, grad_enabled, no_grad, zero_grads

__all__ = [
    "ops",
    "Tensor",
    "Parameter",
    "GROUPS",
    "DimensionError",
    "ContractError",
    "no_grad",
    "grad_enabled",
    "zero_grads",
    "OptimizerState",
    "adam_step",
    "global_grad_norm",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "serialize_params",
    "deserialize_params",
]
