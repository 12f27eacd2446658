"""Numeric core: dense operators on numpy arrays plus a small autodiff tape."""

from rapnet.tensorops.functional import (
    BatchNormStats,
    ShapeError,
    activate,
    batchnorm,
    conv2d,
    l2_normalize,
    l2_normalize_rows,
    maxpool,
    softplus,
    upsample_nearest,
)
from rapnet.tensorops.graph import Graph, Node, UnsupportedOperator

__all__ = [
    "BatchNormStats",
    "Graph",
    "Node",
    "ShapeError",
    "UnsupportedOperator",
    "activate",
    "batchnorm",
    "conv2d",
    "l2_normalize",
    "l2_normalize_rows",
    "maxpool",
    "softplus",
    "upsample_nearest",
]
