"""Reverse-mode autodiff plus the EdgeConv/folding repaint network."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    NetConfig,
    RepaintModel,
    TooFewPoints,
    chamfer_loss,
    decode,
    edge_conv,
    encode,
    folding_grid,
    forward_repaint,
    init_model,
    knn_graph,
)
from .tensor import NaNDetected, NonScalarLoss, ShapeMismatch, Tensor, backward

__all__ = [
    "CheckpointError",
    "NaNDetected",
    "NetConfig",
    "NonScalarLoss",
    "RepaintModel",
    "ShapeMismatch",
    "Tensor",
    "TooFewPoints",
    "backward",
    "chamfer_loss",
    "decode",
    "edge_conv",
    "encode",
    "folding_grid",
    "forward_repaint",
    "init_model",
    "knn_graph",
    "load_checkpoint",
    "save_checkpoint",
]
