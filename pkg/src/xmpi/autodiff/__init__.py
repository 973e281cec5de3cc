"""Minimal reverse-mode autodiff engine and the layers the reconstruction needs."""

from .checkpoint import load_checkpoint, save_checkpoint
from .encoding import encode_coordinates, positional_encoding
from .gradcheck import gradcheck
from .nn import ArchError, DiscriminatorSpec, MLPSpec, Network, build_network, network_forward
from .optim import Adam, AdamState, adam_step
from .tensor import GraphError, NonFiniteError, Tensor, backward, parameter

__all__ = [
    "Adam", "AdamState", "ArchError", "DiscriminatorSpec", "GraphError", "MLPSpec", "Network", "NonFiniteError",
    "Tensor", "adam_step", "backward", "build_network", "encode_coordinates", "gradcheck", "load_checkpoint",
    "network_forward", "parameter", "positional_encoding", "save_checkpoint",
]
