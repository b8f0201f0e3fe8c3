"""Minimal reverse-mode layer set, graph builder and architecture templates."""

from .graph import GraphError, GraphInputError, GraphStateError, LayerSpec, NetworkGraph, specs_from_text, specs_to_text
from .ops import (
    batchnorm_backward,
    batchnorm_forward,
    dense_conv2d,
    dense_conv2d_backward,
    dense_conv2d_forward,
    softmax,
    transposed_conv2d,
    transposed_conv2d_backward,
    transposed_conv2d_forward,
)
from .templates import BranchSpec, FusionTemplate, Head, backward, build_network, forward, template_specs, tiny_ed
