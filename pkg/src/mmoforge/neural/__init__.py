"""Policy network, reverse-mode tape and checkpoint format."""

from .network import (
    ForwardTrace,
    ObsBatch,
    PolicyParams,
    backward,
    embed_entity,
    embed_observation,
    forward,
    forward_batch,
    init_params,
    scaled_dot_attention,
    select_arguments,
)

__all__ = [
    "ForwardTrace",
    "ObsBatch",
    "PolicyParams",
    "backward",
    "embed_entity",
    "embed_observation",
    "forward",
    "forward_batch",
    "init_params",
    "scaled_dot_attention",
    "select_arguments",
]
