"""Federated-learning simulator with secure aggregation, distributed DP, and a
malicious-server data-reconstruction toolkit."""

__version__ = "0.1.0"

from .dp import DPConfig, apply_dp, clip_update, noise_std
from .errors import (
    ConfigurationError,
    GlsimError,
    InputError,
    PlanningError,
    ProtocolError,
)
from .nn import (
    DenseLayer,
    EmbeddingLayer,
    ForwardState,
    GradientUpdate,
    LayerGrad,
    MiniBatch,
    Model,
    backward,
    build_mlp,
    embed,
    forward,
    per_layer_l2_norm,
)
from .rng import RngStream

__all__ = [
    "ConfigurationError",
    "DPConfig",
    "DenseLayer",
    "EmbeddingLayer",
    "ForwardState",
    "GlsimError",
    "GradientUpdate",
    "InputError",
    "LayerGrad",
    "MiniBatch",
    "Model",
    "PlanningError",
    "ProtocolError",
    "RngStream",
    "apply_dp",
    "backward",
    "build_mlp",
    "clip_update",
    "embed",
    "forward",
    "noise_std",
    "per_layer_l2_norm",
]
