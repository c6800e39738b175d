from msim.neural.adam import Adam, NonFiniteGradient
from msim.neural.layers import MLP, LayerNorm, Linear, Module
from msim.neural.tensor import (ShapeError, Tensor, as_tensor, atan2, concat, cross, dot,
                                external, gather, gelu, layer_norm, maximum, no_grad, norm,
                                scatter_add, stack)

__all__ = [
    "Adam", "NonFiniteGradient", "MLP", "LayerNorm", "Linear", "Module", "ShapeError",
    "Tensor", "as_tensor", "atan2", "concat", "cross", "dot", "external", "gather", "gelu",
    "layer_norm", "maximum", "no_grad", "norm", "scatter_add", "stack",
]
