"""Embedding function, decoder-only transformer, masked loss, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import FULL_SCALE, ModelConfig, micro, tiny
from .network import (
    LossResult,
    ModelState,
    RngStreams,
    embed_batch,
    forward_logits,
    hidden_fwd,
    init_params,
    loss_and_grads,
    masked_nll_loss,
    parameter_count,
    validate_gradients,
    zero_grads,
)
from .positions import (
    local_position_indices,
    patch_position_index,
    quantize_patch_interval,
    resolve_local_indices,
)

__all__ = [
    "FULL_SCALE",
    "LossResult",
    "ModelConfig",
    "ModelState",
    "RngStreams",
    "embed_batch",
    "forward_logits",
    "hidden_fwd",
    "init_params",
    "load_checkpoint",
    "local_position_indices",
    "loss_and_grads",
    "masked_nll_loss",
    "micro",
    "parameter_count",
    "patch_position_index",
    "quantize_patch_interval",
    "resolve_local_indices",
    "save_checkpoint",
    "tiny",
    "validate_gradients",
    "zero_grads",
]
