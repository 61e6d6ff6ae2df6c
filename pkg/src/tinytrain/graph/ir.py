"""Static graph IR shared by the forward network and the derived backward graph."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from ..qtensor import QuantParams


class OpKind(str, Enum):
    # forward
    QLINEAR = "QLinear"
    QCONV2D = "QConv2d"
    QDEPTHWISE = "QDepthwiseConv2d"
    ADD = "Add"
    RELU = "ReLU"
    RELU6 = "ReLU6"
    AVGPOOL = "AvgPool"
    FLATTEN = "Flatten"
    QUANTIZE = "Quantize"
    DEQUANTIZE = "Dequantize"
    FLOAT_LINEAR = "FloatLinear"
    SOFTMAX_CE = "SoftmaxCrossEntropy"
    SLICE = "Slice"
    CONCAT = "Concat"
    TRANSPOSE = "Transpose"
    SUM = "Sum"
    CLIP_MASK = "ClipMask"
    # backward kernels
    MASK_GRAD = "MaskGrad"
    CONV_INPUT_GRAD = "ConvInputGrad"
    CONV_WEIGHT_GRAD = "ConvWeightGrad"
    LINEAR_INPUT_GRAD = "LinearInputGrad"
    LINEAR_WEIGHT_GRAD = "LinearWeightGrad"
    BIAS_GRAD = "BiasGrad"
    AVGPOOL_GRAD = "AvgPoolGrad"
    RESHAPE = "Reshape"
    SOFTMAX_CE_GRAD = "SoftmaxCrossEntropyGrad"
    DEQUANTIZE_GRAD = "DequantizeGrad"
    QUANTIZE_GRAD = "QuantizeGrad"
    SLICE_GRAD = "SliceGrad"
    # update
    GRAD_DESCENT = "GradDescent"

    def __str__(self):
        return self.value


CONV_KINDS = (OpKind.QCONV2D, OpKind.QDEPTHWISE)
LINEAR_KINDS = (OpKind.QLINEAR, OpKind.FLOAT_LINEAR)
PARAM_KINDS = CONV_KINDS + LINEAR_KINDS
ELEMENTWISE_KINDS = (OpKind.ADD, OpKind.RELU, OpKind.RELU6, OpKind.SUM, OpKind.MASK_GRAD,
                     OpKind.CLIP_MASK, OpKind.QUANTIZE, OpKind.DEQUANTIZE,
                     OpKind.DEQUANTIZE_GRAD, OpKind.QUANTIZE_GRAD, OpKind.RESHAPE,
                     OpKind.FLATTEN)

# storage classes
FLASH = "flash-weight"
ACTIVATION = "sram-activation"
GRADIENT = "sram-gradient"
UPDATED = "sram-updated-weight"
MASK = "sram-mask"
STORAGE_CLASSES = (FLASH, ACTIVATION, GRADIENT, UPDATED, MASK)

DTYPE_BYTES = {"int8": 1, "int32": 4, "fp32": 4}
DTYPES = ("int8", "int32", "fp32", "bool")

FORWARD, BACKWARD, UPDATE = "forward", "backward", "update"


@dataclass
class TensorRef:
    id: int
    shape: tuple
    dtype: str
    storage: str = ACTIVATION
    name: str = ""
    qparams: QuantParams | None = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.storage not in STORAGE_CLASSES:
            raise ValueError(f"unknown storage class {self.storage!r}")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        if self.dtype == "bool":
            return (self.numel + 7) // 8
        return self.numel * DTYPE_BYTES[self.dtype]


@dataclass
class Node:
    id: int
    op: OpKind
    inputs: list[int]
    outputs: list[int]
    attrs: dict[str, Any] = field(default_factory=dict)
    phase: str = FORWARD
    name: str = ""

    def __post_init__(self):
        self.op = OpKind(self.op)


@dataclass
class Layer:
    """A parametric backbone layer (or the classifier) and its tensors."""

    index: int
    name: str
    kind: str  # stem | pw1 | dw | pw2 | conv | linear | classifier
    node: int
    weight: int
    bias: int
    input: int
    output: int
    weight_slices: dict | None = None  # {"trainable": id, "frozen": id, "channels": [...], "rest": [...]}


@dataclass
class Graph:
    tensors: dict[int, TensorRef] = field(default_factory=dict)
    nodes: list[Node] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    parameters: list[int] = field(default_factory=list)
    trainable: dict[int, list | None] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)
    layers: list[Layer] = field(default_factory=list)
    classifier: Layer | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    # ------------------------------------------------------------ basics
    @property
    def loss(self) -> int | None:
        return self.outputs.get("loss")

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    def new_tensor_id(self) -> int:
        return max(self.tensors, default=-1) + 1

    def new_node_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def add_tensor(self, shape, dtype, storage=ACTIVATION, name="", qparams=None) -> TensorRef:
        t = TensorRef(self.new_tensor_id(), tuple(shape), dtype, storage, name, qparams)
        self.tensors[t.id] = t
        return t

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def node_map(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    def producers(self) -> dict[int, Node]:
        out = {}
        for n in self.nodes:
            for t in n.outputs:
                out[t] = n
        return out

    def consumers(self) -> dict[int, list[Node]]:
        out: dict[int, list[Node]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def nodes_of(self, *kinds) -> list[Node]:
        return [n for n in self.nodes if n.op in kinds]

    def layer_of_param(self, pid: int) -> Layer | None:
        for layer in self.all_layers():
            if pid in (layer.weight, layer.bias):
                return layer
            if layer.weight_slices and pid in (layer.weight_slices["trainable"],
                                               layer.weight_slices["frozen"]):
                return layer
        return None

    def all_layers(self) -> list[Layer]:
        return self.layers + ([self.classifier] if self.classifier else [])

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def param_ids(self) -> set[int]:
        return set(self.parameters)

    def summary(self) -> dict:
        params = sum(self.tensors[p].numel for p in self.parameters)
        return {"nodes": len(self.nodes), "tensors": len(self.tensors),
                "layers": len(self.layers), "parameters": params}
