"""Dense float32 tensors with reverse-mode autodiff, layers and optimizers."""
from .graph import Graph, Node, backward, forward
from .ops import DTYPE, ShapeError, precision
from .params import (ModelParams, OptimizerState, init_params, load_params,
                     optimizer_step, save_params)

__all__ = [
    "DTYPE", "Graph", "ModelParams", "Node", "OptimizerState", "ShapeError",
    "backward", "forward", "init_params", "load_params", "optimizer_step", "precision",
    "save_params",
]
