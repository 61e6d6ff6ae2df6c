from .autodiff import DifferentiationError, derive_backward, saved_activations, saved_input_activations
from .builder import (BackboneConfig, BlockSpec, GraphBuilder, build_backbone, count_macs,
                      count_params, mcunet_5fps_like, mobilenetv2, toy)
from .ir import (ACTIVATION, BACKWARD, FLASH, FORWARD, GRADIENT, MASK, UPDATE, UPDATED, Graph,
                 Layer, Node, OpKind, TensorRef)
from .ops import ShapeError, infer
from .serialize import graph_from_dict, graph_to_dict, load_graph, save_graph
from .validate import Violation, validate

__all__ = [
    "ACTIVATION", "BACKWARD", "BackboneConfig", "BlockSpec", "DifferentiationError", "FLASH",
    "FORWARD", "GRADIENT", "Graph", "GraphBuilder", "Layer", "MASK", "Node", "OpKind",
    "ShapeError", "TensorRef", "UPDATE", "UPDATED", "Violation", "build_backbone", "count_macs",
    "count_params", "derive_backward", "graph_from_dict", "graph_to_dict", "infer",
    "load_graph", "mcunet_5fps_like", "mobilenetv2", "save_graph", "saved_activations",
    "saved_input_activations", "toy", "validate",
]
